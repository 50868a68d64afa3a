"""Synthetic feature sequences and their on-disk formats.

Feature files (``.ddnf``) are laid out as::

    b"DDNF" | version u16 | T u32 | D_sem u32 | D_tex u32 | domain_id u32
    | video_label u8 | frame_labels u8[T] | semantic f32[T*D_sem]
    | textural f32[T*D_tex] | crc32 u32

All integers and floats little-endian, matrices row-major.  The CRC covers
every byte after the version field up to the checksum itself.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DDNF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIB")


class FeatureFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class FeatureSequence:
    video_id: str
    semantic_feats: np.ndarray  # (T, D_sem) float32
    textural_feats: np.ndarray  # (T, D_tex) float32
    frame_labels: np.ndarray    # (T,) bool
    domain_id: int = 0

    def __post_init__(self):
        self.semantic_feats = np.ascontiguousarray(self.semantic_feats, dtype=np.float32)
        self.textural_feats = np.ascontiguousarray(self.textural_feats, dtype=np.float32)
        self.frame_labels = np.asarray(self.frame_labels, dtype=bool)
        if self.semantic_feats.ndim != 2 or self.textural_feats.ndim != 2:
            raise ValueError("feature matrices must be 2-D")
        T = self.semantic_feats.shape[0]
        if self.textural_feats.shape[0] != T or self.frame_labels.shape != (T,):
            raise ValueError("semantic, textural and label lengths disagree")
        if T == 0:
            raise ValueError("feature sequence must have at least one frame")
        self.domain_id = int(self.domain_id)

    @property
    def T(self) -> int:
        return self.semantic_feats.shape[0]

    @property
    def video_label(self) -> bool:
        return bool(self.frame_labels.any())


def write_features(seq: FeatureSequence, path) -> None:
    T, d_sem = seq.semantic_feats.shape
    d_tex = seq.textural_feats.shape[1]
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, T, d_sem, d_tex, seq.domain_id, int(seq.video_label))
    body = (head[6:]
            + seq.frame_labels.astype(np.uint8).tobytes()
            + seq.semantic_feats.astype("<f4").tobytes()
            + seq.textural_feats.astype("<f4").tobytes())
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(head[:6] + body + struct.pack("<I", crc))


def read_features(path, video_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FeatureFormatError("bad magic, not a DDNF feature file", 0)
    if len(buf) < _HEADER.size:
        raise FeatureFormatError("truncated header", len(buf))
    _, version, T, d_sem, d_tex, domain_id, video_label = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"unsupported format version {version}", 4)
    off = _HEADER.size
    expected = off + T + 4 * T * (d_sem + d_tex) + 4
    if len(buf) != expected:
        raise FeatureFormatError(f"truncated or oversized payload: {len(buf)} bytes, expected {expected}",
                                 min(len(buf), expected))
    crc_stored = struct.unpack_from("<I", buf, expected - 4)[0]
    if zlib.crc32(buf[6:expected - 4]) & 0xFFFFFFFF != crc_stored:
        raise FeatureFormatError("checksum mismatch", expected - 4)
    labels = np.frombuffer(buf, dtype=np.uint8, count=T, offset=off)
    if labels.max(initial=0) > 1:
        raise FeatureFormatError("frame label byte not 0/1", off + int(np.argmax(labels > 1)))
    off += T
    sem = np.frombuffer(buf, dtype="<f4", count=T * d_sem, offset=off).reshape(T, d_sem)
    off += 4 * T * d_sem
    tex = np.frombuffer(buf, dtype="<f4", count=T * d_tex, offset=off).reshape(T, d_tex)
    seq = FeatureSequence(video_id or path.stem, sem.copy(), tex.copy(), labels.astype(bool), domain_id)
    if seq.video_label != bool(video_label):
        raise FeatureFormatError("video label disagrees with frame labels", 22)
    return seq


# -- manifests --------------------------------------------------------------

@dataclass
class ManifestEntry:
    video_id: str
    path: str
    domain_id: int
    video_label: bool


@dataclass
class DatasetManifest:
    K: int
    D_sem: int
    D_tex: int
    T_max: int
    split: str
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("root")
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in d.pop("entries")]
        m = cls(entries=entries, root=path.parent, **d)
        for e in m.entries:
            if not 0 <= e.domain_id < m.K:
                raise ValueError(f"{e.video_id}: domain_id {e.domain_id} outside [0, {m.K})")
        return m

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load_sequences(self) -> list[FeatureSequence]:
        seqs = []
        for e in self.entries:
            seq = read_features(self.resolve(e), e.video_id)
            if seq.semantic_feats.shape[1] != self.D_sem or seq.textural_feats.shape[1] != self.D_tex:
                raise ValueError(f"{e.video_id}: feature dims disagree with manifest")
            if seq.T > self.T_max:
                raise ValueError(f"{e.video_id}: T={seq.T} exceeds T_max={self.T_max}")
            seqs.append(seq)
        return seqs


# -- synthesis --------------------------------------------------------------

@dataclass
class SynthesisSpec:
    n_train: int = 400
    n_val: int = 100
    n_test: int = 0
    T: int = 64
    D_sem: int = 24
    D_tex: int = 16
    K: int = 4
    # probabilities of 0, 1, 2, ... forged segments per video
    segment_count_probs: tuple[float, ...] = (0.3, 0.4, 0.3)
    segment_len_range: tuple[int, int] = (8, 20)
    min_segment_gap: int = 4
    # white noise comparable to the signature so single frames are unreliable
    signature_strength: float = 3.0
    noise_level: float = 1.0
    smoothness: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.segment_len_range
        if self.T <= 0:
            raise ValueError("T must be positive")
        if not 1 <= lo <= hi <= self.T:
            raise ValueError(f"segment_len_range {self.segment_len_range} must lie within [1, T={self.T}]")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("video counts must be >= 0")
        probs = np.asarray(self.segment_count_probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0 or (probs < 0).any() or abs(probs.sum() - 1) > 1e-9:
            raise ValueError("segment_count_probs must be a probability vector")
        if self.signature_strength < 0 or self.noise_level < 0:
            raise ValueError("signature_strength and noise_level must be >= 0")
        if not 0 <= self.smoothness < 1:
            raise ValueError("smoothness must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisSpec":
        d = dict(d)
        for key in ("segment_count_probs", "segment_len_range"):
            if key in d:
                d[key] = tuple(d[key])
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class DomainSignatures:
    """Fixed per-dataset forgery directions for each stream."""
    generic_sem: np.ndarray
    generic_tex: np.ndarray
    domain_sem: np.ndarray  # (K, D_sem), each row supported on its own channel subset
    domain_tex: np.ndarray


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _disjoint_directions(rng: np.random.Generator, K: int, dim: int) -> np.ndarray:
    # channel subsets are disjoint when K <= dim; beyond that they wrap
    perm = rng.permutation(dim)
    groups = np.array_split(perm, min(K, dim))
    out = np.zeros((K, dim))
    for k in range(K):
        chans = groups[k % len(groups)]
        out[k, chans] = rng.choice([-1.0, 1.0], size=chans.size) * rng.uniform(0.5, 1.0, size=chans.size)
        out[k] = _unit(out[k])
    return out


def make_signatures(spec: SynthesisSpec) -> DomainSignatures:
    rng = np.random.default_rng([spec.seed, 1])
    return DomainSignatures(
        generic_sem=_unit(rng.standard_normal(spec.D_sem)),
        generic_tex=_unit(rng.standard_normal(spec.D_tex)),
        domain_sem=_disjoint_directions(rng, spec.K, spec.D_sem),
        domain_tex=_disjoint_directions(rng, spec.K, spec.D_tex),
    )


def _smooth_background(rng: np.random.Generator, T: int, dim: int, smoothness: float) -> np.ndarray:
    # random walk, then a one-pole low-pass; centred per channel, unit overall scale
    walk = np.cumsum(rng.standard_normal((T, dim)) * 0.3, axis=0)
    out = np.empty_like(walk)
    acc = walk[0]
    for t in range(T):
        acc = smoothness * acc + (1 - smoothness) * walk[t]
        out[t] = acc
    out -= out.mean(axis=0)
    scale = out.std() if out.std() > 0 else 1.0
    return out / scale


def _place_segments(rng: np.random.Generator, spec: SynthesisSpec, n_seg: int) -> list[tuple[int, int]]:
    lo, hi = spec.segment_len_range
    for _ in range(100):
        segs = []
        for _ in range(n_seg):
            length = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, spec.T - length + 1))
            segs.append((start, start + length))
        segs.sort()
        if all(b[0] - a[1] >= spec.min_segment_gap for a, b in zip(segs, segs[1:])):
            return segs
    # could not fit that many separated segments; fall back to one fewer
    return _place_segments(rng, spec, n_seg - 1) if n_seg > 0 else []


def synthesize_video(rng: np.random.Generator, spec: SynthesisSpec, sig: DomainSignatures,
                     video_id: str) -> tuple[FeatureSequence, list[tuple[int, int]]]:
    T = spec.T
    domain = int(rng.integers(0, spec.K))
    n_seg = int(rng.choice(len(spec.segment_count_probs), p=spec.segment_count_probs))
    segs = _place_segments(rng, spec, n_seg)
    sem = _smooth_background(rng, T, spec.D_sem, spec.smoothness)
    tex = _smooth_background(rng, T, spec.D_tex, spec.smoothness)
    sem += spec.noise_level * rng.standard_normal((T, spec.D_sem))
    tex += spec.noise_level * rng.standard_normal((T, spec.D_tex))
    labels = np.zeros(T, dtype=bool)
    s = spec.signature_strength
    for a, b in segs:
        labels[a:b] = True
        sem[a:b] += s * (sig.generic_sem + sig.domain_sem[domain])
        tex[a:b] += s * (sig.generic_tex + sig.domain_tex[domain])
    return FeatureSequence(video_id, sem, tex, labels, domain), segs


def synthesize_split(spec: SynthesisSpec, split: str, n: int) -> list[FeatureSequence]:
    split_index = {"train": 0, "val": 1, "test": 2}[split]
    sig = make_signatures(spec)
    rng = np.random.default_rng([spec.seed, 2, split_index])
    return [synthesize_video(rng, spec, sig, f"{split}_{i:05d}")[0] for i in range(n)]


def synthesize_dataset(spec: SynthesisSpec, out_dir) -> dict[str, DatasetManifest]:
    """Write ``<split>/<video>.ddnf`` files plus ``<split>.json`` manifests under ``out_dir``."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for split, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        if n == 0 and split == "test":
            continue
        (out_dir / split).mkdir(exist_ok=True)
        m = DatasetManifest(K=spec.K, D_sem=spec.D_sem, D_tex=spec.D_tex, T_max=spec.T,
                            split=split, seed=spec.seed, root=out_dir)
        for seq in synthesize_split(spec, split, n):
            rel = f"{split}/{seq.video_id}.ddnf"
            write_features(seq, out_dir / rel)
            m.entries.append(ManifestEntry(seq.video_id, rel, seq.domain_id, seq.video_label))
        m.save(out_dir / f"{split}.json")
        manifests[split] = m
    return manifests


def label_runs(labels: np.ndarray) -> list[tuple[int, int]]:
    """Half-open runs of True in a boolean vector."""
    labels = np.asarray(labels, dtype=bool)
    padded = np.concatenate([[False], labels, [False]]).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return [(int(a), int(b)) for a, b in zip(starts, ends)]
