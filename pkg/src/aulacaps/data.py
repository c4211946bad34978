"""Windowed samples, frame normalisation, a synthetic AU-lifecycle generator,
the on-disk dataset format and subject-wise fold splitting."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

AU_IDS = (1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24)
AU_NAMES = tuple(f"AU{i}" for i in AU_IDS)
AU_DESCRIPTIONS = {
    1: "Inner Brow Raiser", 2: "Outer Brow Raiser", 4: "Brow Lowerer", 6: "Cheek Raiser",
    7: "Eyelid Tightener", 10: "Upper Lip Raiser", 12: "Lip Corner Puller", 14: "Dimpler",
    15: "Lip Corner Depressor", 17: "Chin Raiser", 23: "Lip Tightener", 24: "Lip Pressor",
}
FORMAT_TAG = "aulacaps-dataset/1"


def au_index(au_id: int) -> int:
    try:
        return AU_IDS.index(int(au_id))
    except ValueError:
        raise ValueError(f"AU{au_id} is not one of {AU_NAMES}") from None


class DatasetError(Exception):
    pass


class CorruptHeaderError(DatasetError):
    pass


class TruncatedBlobError(DatasetError):
    pass


class LabelCountMismatchError(DatasetError):
    pass


@dataclass
class VideoSequence:
    subject_id: str
    frames: np.ndarray  # (F, H, W, C) float32 in [-1, 1]
    labels: np.ndarray  # (F, 12) uint8
    frame_rate: float = 25.0

    def __post_init__(self):
        if self.frames.ndim == 3:
            self.frames = self.frames[..., None]
        if len(self.frames) != len(self.labels):
            raise LabelCountMismatchError(
                f"subject {self.subject_id}: {len(self.frames)} frames but {len(self.labels)} label rows"
            )

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class WindowSample:
    window: np.ndarray  # (2N+1, H, W, C)
    foi: np.ndarray
    label: np.ndarray
    subject_id: str = ""
    frame_index: int = 0


@dataclass
class DatasetManifest:
    subjects: list[dict]
    au_labels: list[str] = field(default_factory=lambda: list(AU_NAMES))
    occurrence_rates: list[float] = field(default_factory=lambda: [0.0] * len(AU_IDS))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "au_labels": list(self.au_labels),
            "occurrence_rates": [float(r) for r in self.occurrence_rates],
            "subjects": self.subjects,
        }

    def active_aus(self) -> list[int]:
        """Indices of AUs that occur at least once in the dataset."""
        return [i for i, r in enumerate(self.occurrence_rates) if r > 0]


@dataclass
class FoldSplit:
    folds: list[list[str]]

    def train_test(self, k: int) -> tuple[list[str], list[str]]:
        test = list(self.folds[k])
        train = [s for i, f in enumerate(self.folds) if i != k for s in f]
        return train, test

    def __len__(self) -> int:
        return len(self.folds)


# --- frames and windows ------------------------------------------------------


def normalize_frame(raw) -> np.ndarray:
    """8-bit intensities to floats in [-1, 1]: p = raw / 127.5 - 1."""
    return (np.asarray(raw, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def denormalize_frame(frame) -> np.ndarray:
    return np.clip(np.rint((np.asarray(frame, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def window_indices(frame_count: int, N: int = 2) -> np.ndarray:
    """(F, 2N+1) frame indices with edge replication at both ends."""
    if frame_count < 1:
        raise ValueError("cannot build windows for an empty video")
    t = np.arange(frame_count)[:, None] + np.arange(-N, N + 1)[None, :]
    return np.clip(t, 0, frame_count - 1)


def make_windows(video: VideoSequence, N: int = 2) -> list[WindowSample]:
    """One sample per frame; the frame of interest sits in the middle of its window."""
    idx = window_indices(len(video), N)
    return [
        WindowSample(video.frames[row], video.frames[row[N]], video.labels[t], video.subject_id, t)
        for t, row in enumerate(idx)
    ]


# --- synthetic generator -----------------------------------------------------

# face-region centres (x, y) in unit coordinates; bilateral AUs get two blobs
AU_REGIONS = {
    1: [(0.42, 0.27), (0.58, 0.27)],
    2: [(0.27, 0.24), (0.73, 0.24)],
    4: [(0.50, 0.33)],
    6: [(0.30, 0.52), (0.70, 0.52)],
    7: [(0.36, 0.42), (0.64, 0.42)],
    10: [(0.50, 0.62)],
    12: [(0.34, 0.72), (0.66, 0.72)],
    14: [(0.28, 0.78), (0.72, 0.78)],
    15: [(0.40, 0.84), (0.60, 0.84)],
    17: [(0.50, 0.93)],
    23: [(0.50, 0.73)],
    24: [(0.50, 0.80)],
}
BLOB_SIGMA = 0.05  # fraction of frame size
BLOB_GAIN = 100.0  # 8-bit intensity added at full activation
LABEL_THRESHOLD = 0.3
COUPLED_PAIRS = ((4, 7), (4, 17))
COUPLING_PROB = 0.5


@dataclass
class SynthSpec:
    subjects: int = 6
    frames_per_subject: int = 120
    active_au_set: tuple[int, ...] = (4, 7, 17)
    seed: int = 0
    size: int = 96
    noise: float = 3.0


@dataclass
class Episode:
    start: int
    onset: int
    apex: int
    offset: int
    peak: float

    def intensity(self, frames: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-frame intensity and phase code (0 neutral, 1 onset, 2 apex, 3 offset)."""
        i = np.zeros(frames)
        ph = np.zeros(frames, dtype=np.int8)
        ramp_up = self.peak * np.arange(1, self.onset + 1) / self.onset
        ramp_down = self.peak * (1.0 - np.arange(1, self.offset + 1) / (self.offset + 1))
        seg = np.concatenate([ramp_up, np.full(self.apex, self.peak), ramp_down])
        codes = np.concatenate([np.full(self.onset, 1), np.full(self.apex, 2), np.full(self.offset, 3)])
        lo, hi = max(self.start, 0), min(self.start + len(seg), frames)
        if lo < hi:
            i[lo:hi] = seg[lo - self.start : hi - self.start]
            ph[lo:hi] = codes[lo - self.start : hi - self.start]
        return i, ph


@dataclass
class SyntheticDataset:
    spec: SynthSpec
    sequences: list[VideoSequence]
    intensities: dict[str, np.ndarray]  # (F, 12)
    phases: dict[str, np.ndarray]  # (F, 12) phase codes of the dominant episode

    def manifest(self) -> DatasetManifest:
        return manifest_for(self.sequences)


def blob_map(au_id: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = BLOB_SIGMA * size
    out = np.zeros((size, size))
    for cx, cy in AU_REGIONS[au_id]:
        px, py = cx * (size - 1), cy * (size - 1)
        out += np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * sigma**2))
    return np.minimum(out, 1.0)


def blob_region(au_id: int, size: int, radius_sigmas: float = 2.5) -> np.ndarray:
    """Boolean mask of pixels within ``radius_sigmas`` blob widths of an AU centre."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = radius_sigmas * BLOB_SIGMA * size
    mask = np.zeros((size, size), dtype=bool)
    for cx, cy in AU_REGIONS[au_id]:
        mask |= (xx - cx * (size - 1)) ** 2 + (yy - cy * (size - 1)) ** 2 <= r * r
    return mask


def _identity_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    face = np.exp(-(((xx - 0.5) / 0.42) ** 2 + ((yy - 0.55) / 0.52) ** 2) ** 2)
    base = 60.0 + 70.0 * face
    for _ in range(6):
        cx, cy = rng.uniform(0.1, 0.9, 2)
        s = rng.uniform(0.08, 0.25)
        base += rng.uniform(-25, 25) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return base


def _episodes(rng: np.random.Generator, frames: int) -> list[Episode]:
    eps = []
    t = int(rng.integers(0, 12))
    while t < frames:
        ep = Episode(
            start=t,
            onset=int(rng.integers(4, 11)),
            apex=int(rng.integers(3, 9)),
            offset=int(rng.integers(4, 11)),
            peak=float(rng.uniform(0.7, 1.0)),
        )
        eps.append(ep)
        t = ep.start + ep.onset + ep.apex + ep.offset + int(rng.integers(5, 25))
    return eps


def synth_generate(spec: SynthSpec | None = None, **kw) -> SyntheticDataset:
    """Deterministic synthetic AU videos.

    Each synthetic AU is a fixed Gaussian brightness blob at its face region
    whose intensity follows onset / apex / offset episodes; each subject has a
    static identity texture. Some AU4 episodes are copied onto AU7 and AU17.
    """
    spec = spec or SynthSpec(**kw)
    if spec.frames_per_subject < 1 or spec.subjects < 1:
        raise ValueError("synthetic dataset needs at least one subject and one frame")
    active = [int(a) for a in spec.active_au_set]
    for a in active:
        au_index(a)
    rng = np.random.default_rng(spec.seed)
    size, F = spec.size, spec.frames_per_subject
    blobs = {a: blob_map(a, size) for a in active}
    sequences, intens, phases = [], {}, {}
    for s in range(spec.subjects):
        sid = f"S{s + 1:02d}"
        base = _identity_texture(rng, size)
        eps = {a: _episodes(rng, F) for a in active}
        for lead, partner in COUPLED_PAIRS:
            if lead in eps and partner in eps:
                for ep in eps[lead]:
                    if rng.random() < COUPLING_PROB:
                        shift = int(rng.integers(-1, 2))
                        eps[partner].append(Episode(ep.start + shift, ep.onset, ep.apex, ep.offset, ep.peak))
        inten = np.zeros((F, len(AU_IDS)))
        phase = np.zeros((F, len(AU_IDS)), dtype=np.int8)
        for a in active:
            col = au_index(a)
            for ep in eps[a]:
                i, ph = ep.intensity(F)
                take = i > inten[:, col]
                inten[take, col] = i[take]
                phase[take, col] = ph[take]
        noise = rng.normal(0.0, spec.noise, (F, size, size))
        raw = base[None] + noise
        for a in active:
            raw += inten[:, au_index(a)][:, None, None] * BLOB_GAIN * blobs[a][None]
        raw8 = np.clip(np.rint(raw), 0, 255).astype(np.uint8)
        frames = normalize_frame(raw8)[..., None]
        labels = (inten >= LABEL_THRESHOLD).astype(np.uint8)
        sequences.append(VideoSequence(sid, frames, labels))
        intens[sid] = inten
        phases[sid] = phase
    return SyntheticDataset(spec, sequences, intens, phases)


# --- on-disk format ------------------------------------------------------------


def manifest_for(sequences: list[VideoSequence]) -> DatasetManifest:
    labels = np.concatenate([v.labels for v in sequences]) if sequences else np.zeros((0, len(AU_IDS)))
    rates = labels.mean(axis=0).tolist() if len(labels) else [0.0] * len(AU_IDS)
    subjects = [
        {
            "id": v.subject_id,
            "frame_count": int(len(v)),
            "shape": [int(x) for x in v.frames.shape[1:]],
            "frames_file": f"frames_{v.subject_id}.bin",
            "labels_file": f"labels_{v.subject_id}.csv",
            "frame_rate": float(v.frame_rate),
        }
        for v in sequences
    ]
    return DatasetManifest(subjects, list(AU_NAMES), rates)


def _labels_csv(labels: np.ndarray, names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    w.writerows(labels.astype(int).tolist())
    return buf.getvalue()


def save_dataset(path, sequences, manifest: DatasetManifest | None = None) -> DatasetManifest:
    """Write ``manifest.json`` plus per-subject frame blobs and label CSVs."""
    if isinstance(sequences, SyntheticDataset):
        sequences = sequences.sequences
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = manifest or manifest_for(sequences)
    by_id = {s["id"]: s for s in manifest.subjects}
    for v in sequences:
        entry = by_id[v.subject_id]
        (path / entry["frames_file"]).write_bytes(np.ascontiguousarray(v.frames, dtype="<f4").tobytes())
        (path / entry["labels_file"]).write_text(_labels_csv(v.labels, manifest.au_labels), encoding="utf-8")
    (path / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    return manifest


def _read_manifest(path: Path) -> DatasetManifest:
    mpath = path / "manifest.json"
    try:
        raw = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"{mpath}: no manifest") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptHeaderError(f"{mpath}: {exc}") from None
    if not isinstance(raw, dict) or not {"subjects", "au_labels", "occurrence_rates"} <= set(raw):
        raise CorruptHeaderError(f"{mpath}: missing subjects/au_labels/occurrence_rates")
    if list(raw["au_labels"]) != list(AU_NAMES):
        raise CorruptHeaderError(f"{mpath}: au_labels must be {list(AU_NAMES)}")
    if len(raw["occurrence_rates"]) != len(AU_NAMES):
        raise CorruptHeaderError(f"{mpath}: expected {len(AU_NAMES)} occurrence rates")
    for s in raw["subjects"]:
        if not {"id", "frame_count", "shape", "frames_file", "labels_file"} <= set(s):
            raise CorruptHeaderError(f"{mpath}: subject entry {s!r} is incomplete")
    return DatasetManifest(raw["subjects"], raw["au_labels"], raw["occurrence_rates"])


def load_dataset(path) -> tuple[DatasetManifest, list[VideoSequence]]:
    path = Path(path)
    manifest = _read_manifest(path)
    sequences = []
    for s in manifest.subjects:
        shape = tuple(int(x) for x in s["shape"])
        if len(shape) == 2:
            shape = shape + (1,)
        n = int(s["frame_count"])
        fpath = path / s["frames_file"]
        blob = fpath.read_bytes()
        expected = n * int(np.prod(shape)) * 4
        if len(blob) < expected:
            raise TruncatedBlobError(f"{fpath.name}: {len(blob)} bytes, expected {expected}")
        if len(blob) > expected:
            raise DatasetError(f"{fpath.name}: {len(blob) - expected} trailing bytes")
        frames = np.frombuffer(blob, dtype="<f4").reshape((n,) + shape).astype(np.float32)
        lpath = path / s["labels_file"]
        rows = list(csv.reader(io.StringIO(lpath.read_text(encoding="utf-8"))))
        if not rows or rows[0] != list(manifest.au_labels):
            raise CorruptHeaderError(f"{lpath.name}: header must be {','.join(manifest.au_labels)}")
        body = rows[1:]
        if len(body) != n:
            raise LabelCountMismatchError(f"{lpath.name}: {len(body)} label rows, manifest frame_count {n}")
        try:
            labels = np.array([[int(x) for x in r] for r in body], dtype=np.uint8).reshape(n, len(AU_NAMES))
        except ValueError as exc:
            raise CorruptHeaderError(f"{lpath.name}: {exc}") from None
        if labels.max(initial=0) > 1:
            raise CorruptHeaderError(f"{lpath.name}: labels must be 0/1")
        sequences.append(VideoSequence(str(s["id"]), frames, labels, float(s.get("frame_rate", 25.0))))
    if sequences:
        rates = np.concatenate([v.labels for v in sequences]).mean(axis=0)
        if not np.allclose(rates, manifest.occurrence_rates, atol=1e-9):
            raise CorruptHeaderError(f"{path / 'manifest.json'}: occurrence_rates disagree with label files")
    return manifest, sequences


# --- folds -------------------------------------------------------------------


def split_folds(subject_ids, k: int = 3, seed: int = 0) -> FoldSplit:
    """Subject-wise k-fold partition; fold sizes differ by at most one."""
    ids = sorted(str(s) for s in subject_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if len(ids) < k:
        raise ValueError(f"cannot split {len(ids)} subjects into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit([[ids[i] for i in part] for part in np.array_split(order, k)])


def holdout_subjects(train_ids, fraction: float = 0.1, seed: int = 0) -> tuple[list[str], list[str]]:
    """Split training subjects into (fit, validation); at least one of each."""
    ids = sorted(train_ids)
    if len(ids) < 2:
        return ids, []
    n_val = min(max(1, int(round(fraction * len(ids)))), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    return [s for s in ids if s not in val], val
