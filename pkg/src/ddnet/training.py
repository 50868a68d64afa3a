"""Composite objective, AdamW, the training loop and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .config import EvalParams, LossWeights, ModelConfig, TrainConfig
from .data import FeatureSequence
from .evaluation import EvalReport, evaluate_probs
from .gradcheck import GradCheckReport, finite_diff_check
from .losses import LossParts, adv_loss, frame_loss, total_loss, video_loss
from .model import Batch, DDNet, ModelOutput
from .tensor import NumericalError, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "L_frame", "L_video", "L_adv", "L_orth", "L_total",
                  "val_AP50", "val_AP75", "val_AP95"]


class TrainingError(RuntimeError):
    pass


def compute_loss(model: DDNet, batch: Batch, weights: LossWeights, use_grl: bool = True,
                 stop_grad: bool = True) -> tuple[Tensor, LossParts, ModelOutput]:
    out = model.forward(batch.sem, batch.tex, use_grl=use_grl, stop_grad=stop_grad)
    zero = Tensor(0.0)
    parts = LossParts(
        frame=frame_loss(out.frames.probs, batch.frame_labels),
        video=video_loss(out.video_prob, batch.video_labels),
        adv=adv_loss(out.tda.adv.O_adv, batch.domains) if out.tda else zero,
        orth=out.tda.L_orth if out.tda else zero,
    )
    return total_loss(parts, weights), parts, out


class AdamW:
    """Adam with decoupled weight decay (``p -= lr * wd * p`` before the Adam step)."""

    def __init__(self, named: Sequence[tuple[str, Tensor]], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.named = list(named)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = {n: np.zeros(t.shape) for n, t in self.named}
        self.v = {n: np.zeros(t.shape) for n, t in self.named}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for n, p in self.named:
            g = p.grad
            if g is None:
                continue
            m = self.m[n] = b1 * self.m[n] + (1 - b1) * g
            v = self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            p.data = p.data * (1 - self.lr * self.weight_decay) - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.m:
            out[f"adam_m/{n}"] = self.m[n]
            out[f"adam_v/{n}"] = self.v[n]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for n in self.m:
            self.m[n] = arrays[f"adam_m/{n}"].copy()
            self.v[n] = arrays[f"adam_v/{n}"].copy()
        self.t = t


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = tn.parameters_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"DDCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    config: dict
    step: int
    rng_state: dict = field(default_factory=dict)

    def save(self, path) -> None:
        blobs = [("param/" + n, a) for n, a in self.params.items()] + list(self.optimizer.items())
        header = {
            "config": self.config,
            "step": self.step,
            "rng_state": self.rng_state,
            "blobs": [{"name": n, "shape": list(np.shape(a))} for n, a in blobs],
        }
        hdr = json.dumps(header, sort_keys=True).encode()
        body = struct.pack("<I", len(hdr)) + hdr + b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in blobs)
        crc = zlib.crc32(body) & 0xFFFFFFFF
        Path(path).write_bytes(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION) + body + struct.pack("<I", crc))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        buf = Path(path).read_bytes()
        if buf[:4] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        body = buf[6:-4]
        if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack_from("<I", buf, len(buf) - 4)[0]:
            raise ValueError(f"{path}: checksum mismatch")
        (hlen,) = struct.unpack_from("<I", body, 0)
        header = json.loads(body[4:4 + hlen])
        off = 4 + hlen
        params, opt = {}, {}
        for b in header["blobs"]:
            n = int(np.prod(b["shape"], dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(b["shape"]).astype(np.float64)
            off += 8 * n
            if b["name"].startswith("param/"):
                params[b["name"][6:]] = arr
            else:
                opt[b["name"]] = arr
        return cls(params, opt, header["config"], header["step"], header.get("rng_state", {}))


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["kernel_sizes"] = tuple(d["kernel_sizes"])
    return ModelConfig(**d)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = LossWeights(**d["weights"])
    d["betas"] = tuple(d["betas"])
    return TrainConfig(**d)


def model_from_checkpoint(ckpt: Checkpoint) -> DDNet:
    model = DDNet(model_config_from_dict(ckpt.config["model"]), seed=ckpt.config["train"]["seed"])
    model.params.load_state(ckpt.params)
    return model


# -- gradient check ---------------------------------------------------------

PARAM_GROUPS = (
    ("clfe", ("clfe.",)),
    ("transformer", ("dsgl.tf",)),
    ("graph", ("dsgl.w_", "dsgl.gc", "dsgl.fuse")),
    ("heads", ("head.",)),
    ("tda", ("tda.",)),
)


def gradcheck_groups(model: DDNet, batch: Batch, weights: LossWeights, h: float = 1e-4, tol: float = 1e-4,
                     sample: int | None = None, seed: int = 0) -> list[GradCheckReport]:
    """One finite-difference report per parameter group of the full training objective."""
    named = model.trainable()
    reports = []
    for group, prefixes in PARAM_GROUPS:
        members = [(n, t) for n, t in named if n.startswith(prefixes)]
        if not members:
            continue
        reports.append(finite_diff_check(
            lambda: compute_loss(model, batch, weights)[0], [t for _, t in members], h=h, tol=tol,
            name=group, names=[n for n, _ in members], sample=sample, seed=seed))
    return reports


# -- training loop ----------------------------------------------------------

@dataclass
class TrainResult:
    model: DDNet
    optimizer: AdamW
    step: int
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    last_report: EvalReport | None = None

    def checkpoint(self, train_cfg: TrainConfig) -> Checkpoint:
        return Checkpoint(
            params=self.model.params.state(),
            optimizer=self.optimizer.state(),
            config={"model": dataclasses.asdict(self.model.cfg), "train": dataclasses.asdict(train_cfg)},
            step=self.step,
            rng_state={"shuffle": "per-epoch", "seed": train_cfg.seed, "step": self.step},
        )


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 7, epoch]).permutation(n)


def iter_batches(seqs: Sequence[FeatureSequence], batch_size: int):
    for i in range(0, len(seqs), batch_size):
        yield Batch.from_sequences(list(seqs[i:i + batch_size]))


def evaluate_model(model: DDNet, seqs: Sequence[FeatureSequence], params: EvalParams | None = None,
                   batch_size: int = 32) -> EvalReport:
    ids, probs, labels = [], [], []
    for batch in iter_batches(seqs, batch_size):
        p = model.predict(batch)
        ids += batch.video_ids
        probs += list(p)
        labels += list(batch.frame_labels)
    return evaluate_probs(ids, probs, labels, params)


def _diagnose(step: int, exc: Exception, params: Sequence[Tensor]) -> TrainingError:
    gmax = max((float(np.max(np.abs(p.grad))) for p in params if p.grad is not None), default=0.0)
    return TrainingError(f"numerical failure at step {step}: {exc} (max |grad| = {gmax:.3e})")


def train(
    train_seqs: Sequence[FeatureSequence],
    val_seqs: Sequence[FeatureSequence],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    eval_params: EvalParams | None = None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    metrics_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train with AdamW on shuffled mini-batches; deterministic for a fixed seed.

    Shuffling uses one independent stream per epoch, so a checkpoint taken at
    any step resumes onto exactly the same batch sequence.
    """
    train_cfg.validate()
    eval_params = eval_params or EvalParams()
    model = DDNet(model_cfg, seed=train_cfg.seed)
    named = model.trainable()
    opt = AdamW(named, train_cfg.lr, train_cfg.betas, train_cfg.adam_eps, train_cfg.weight_decay)
    step = 0
    if resume is not None:
        model.params.load_state(resume.params)
        opt.load_state(resume.optimizer, resume.step)
        step = resume.step
    tensors = [t for _, t in named]
    n = len(train_seqs)
    steps_per_epoch = max(1, -(-n // train_cfg.batch_size)) if n else 0
    total_steps = steps_per_epoch * train_cfg.epochs
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    result = TrainResult(model, opt, step)

    if metrics_path is not None and step == 0:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)

    sums = dict.fromkeys(("frame", "video", "adv", "orth", "total"), 0.0)
    count = 0
    while step < total_steps:
        epoch, pos = divmod(step, steps_per_epoch)
        order = epoch_order(n, train_cfg.seed, epoch)
        idx = order[pos * train_cfg.batch_size:(pos + 1) * train_cfg.batch_size]
        batch = Batch.from_sequences([train_seqs[i] for i in idx])
        model.params.zero_grad()
        try:
            loss, parts, _ = compute_loss(model, batch, train_cfg.weights)
            loss.backward()
            for p in tensors:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericalError("non-finite gradient")
        except NumericalError as exc:
            raise _diagnose(step, exc, tensors) from exc
        if train_cfg.clip_norm is not None:
            clip_grad_norm(tensors, train_cfg.clip_norm)
        opt.step()
        step += 1
        result.step = step
        lv = float(loss.data)
        result.step_losses.append(lv)
        for k, v in parts.values().items():
            sums[k] += v
        sums["total"] += lv
        count += 1

        if step % steps_per_epoch == 0 or step == total_steps:
            row = {"step": step, **{f"L_{k}": v / count for k, v in sums.items()}}
            ep = -(-step // steps_per_epoch)
            if val_seqs and (ep % train_cfg.eval_every == 0 or step == total_steps):
                rep = evaluate_model(model, val_seqs, eval_params)
                result.last_report = rep
                row.update(val_AP50=rep.ap.get("0.5"), val_AP75=rep.ap.get("0.75"), val_AP95=rep.ap.get("0.95"))
            result.history.append(row)
            if metrics_path is not None:
                with open(metrics_path, "a", newline="") as fh:
                    csv.writer(fh).writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
            if on_epoch is not None:
                on_epoch(row)
            sums = dict.fromkeys(sums, 0.0)
            count = 0
    return result


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))
