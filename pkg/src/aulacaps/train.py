"""Adam, learning-rate schedule, subject-wise cross-validated training, metrics,
stream ablations, temporal traces and guided-backprop saliency."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import capsules as caps
from . import data as D
from . import losses as L
from . import model as M
from .autodiff import Tensor

log = logging.getLogger(__name__)


# --- optimiser -----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(named_params, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update using each parameter's ``.grad`` (missing = zero)."""
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
    return state


@dataclass
class TrainConfig:
    lr0: float = 2.0e-4
    decay: float = 0.9
    epochs: int = 12
    batch_size: int = 24
    patience: int = 2
    val_fraction: float = 0.1
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("lr0", "decay", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def lr_at_epoch(e: int, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    if e < 0:
        raise ValueError("epoch index must be >= 0")
    return cfg.lr0 * cfg.decay**e


# --- metrics -----------------------------------------------------------------


@dataclass
class MetricsReport:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    avg_f1: float
    evaluated_aus: list[str]
    co_activation: list[list[int]]
    threshold: float
    n_frames: int
    counts: dict[str, list[int]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def confusion_counts(pred: np.ndarray, labels: np.ndarray):
    pred = pred.astype(bool)
    labels = labels.astype(bool)
    tp = (pred & labels).sum(axis=0)
    fp = (pred & ~labels).sum(axis=0)
    fn = (~pred & labels).sum(axis=0)
    return tp, fp, fn


def f1_from_counts(tp, fp, fn):
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    recall = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
    denom = precision + recall
    f1 = np.divide(2 * recall * precision, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def co_activation_matrix(labels) -> np.ndarray:
    """M[i, j] = number of frames where AU i and AU j are both active."""
    y = np.asarray(labels, dtype=np.int64)
    return y.T @ y


def metrics_from_predictions(probs, labels, threshold: float = 0.5, au_indices=None) -> MetricsReport:
    """Per-AU precision/recall/F1 after thresholding, and their unweighted mean.

    ``au_indices`` restricts the average to a subset of AUs (all 12 by default).
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if len(probs) == 0:
        raise ValueError("cannot evaluate an empty set")
    pred = probs >= threshold
    tp, fp, fn = confusion_counts(pred, labels)
    p, r, f1 = f1_from_counts(tp, fp, fn)
    idx = list(range(labels.shape[1])) if au_indices is None else list(au_indices)
    return MetricsReport(
        precision=p.tolist(),
        recall=r.tolist(),
        f1=f1.tolist(),
        avg_f1=float(np.mean(f1[idx])) if idx else 0.0,
        evaluated_aus=[D.AU_NAMES[i] for i in idx],
        co_activation=co_activation_matrix(labels).tolist(),
        threshold=threshold,
        n_frames=int(len(labels)),
        counts={"tp": tp.tolist(), "fp": fp.tolist(), "fn": fn.tolist()},
    )


# --- batching ------------------------------------------------------------------


class WindowBank:
    """Window index over several videos; batches are gathered lazily."""

    def __init__(self, sequences, N: int = 2):
        self.sequences = list(sequences)
        self.N = N
        self.index = np.array(
            [(si, t) for si, v in enumerate(self.sequences) for t in range(len(v))], dtype=np.int64
        ).reshape(-1, 2)
        self._rows = [D.window_indices(len(v), N) for v in self.sequences]

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, rows) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for si, t in self.index[rows]:
            v = self.sequences[si]
            xs.append(v.frames[self._rows[si][t]])
            ys.append(v.labels[t])
        return np.stack(xs), np.stack(ys).astype(np.float32)

    def labels(self) -> np.ndarray:
        return np.concatenate([v.labels for v in self.sequences]) if self.sequences else np.zeros((0, 12))

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start : start + batch_size])


def batch_loss(model: M.AULACaps, x, y, loss_cfg: L.LossConfig, training: bool = True):
    res = M.forward(model, x, training=training, label_for_decoder=y)
    margin = L.margin_loss(res.au_probs, y, loss_cfg)
    target = M.to_channel_first(Tensor(x), model.config)[:, :, model.config.window_N]
    rec = L.reconstruction_loss(target.detach(), res.reconstruction)
    return L.total_loss(margin, rec, loss_cfg), res


def predict(model: M.AULACaps, bank: WindowBank, batch_size: int = 24) -> np.ndarray:
    """AU probabilities for every window in eval mode."""
    out = []
    model.eval()
    with ad.no_grad():
        for x, _ in bank.batches(batch_size):
            u = model.primary(x)
            v, _ = caps.route(u, model.votes, model.config.routing_iterations)
            out.append(caps.capsule_lengths(v).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.au_count))


def evaluate(model: M.AULACaps, windows, threshold: float = 0.5, au_indices=None) -> MetricsReport:
    """Metrics of ``model`` on a :class:`WindowBank` or a list of videos."""
    bank = windows if isinstance(windows, WindowBank) else WindowBank(windows, model.config.window_N)
    if not len(bank):
        raise ValueError("cannot evaluate an empty set")
    return metrics_from_predictions(predict(model, bank), bank.labels(), threshold, au_indices)


def mean_loss(model: M.AULACaps, bank: WindowBank, loss_cfg: L.LossConfig, batch_size: int) -> float:
    """Training-mode loss over a bank without touching BatchNorm running statistics."""
    bns = [m for m in model.modules() if hasattr(m, "track_stats")]
    for bn in bns:
        bn.track_stats = False
    total, n = 0.0, 0
    try:
        with ad.no_grad():
            for x, y in bank.batches(batch_size):
                loss, _ = batch_loss(model, x, y, loss_cfg, training=True)
                total += loss.item() * len(x)
                n += len(x)
    finally:
        for bn in bns:
            bn.track_stats = True
    return total / max(n, 1)


def fold_class_weights(labels: np.ndarray, active: list[int]) -> np.ndarray:
    """Occurrence-rate weights over the active AUs; inactive AUs get weight 0."""
    w = np.zeros(labels.shape[1])
    if active:
        rates = L.occurrence_rates(labels)[active]
        w[active] = L.class_weights(rates, num_frames=len(labels))
    return w


# --- training ----------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    train_subjects: list[str]
    val_subjects: list[str]
    test_subjects: list[str]
    class_weights: list[float]
    log: list[dict]
    best_epoch: int
    test_probs: dict[str, np.ndarray]
    model: M.AULACaps | None = None


@dataclass
class TrainResult:
    folds: list[FoldResult]
    report: MetricsReport
    active_aus: list[int]


def _log_line(row: dict) -> str:
    return f"{row['epoch']},{row['fold']},{row['lr']!r},{row['train_loss']!r},{row['val_avg_f1']!r}"


def train_fold(
    sequences: dict[str, D.VideoSequence],
    train_ids,
    test_ids,
    model_cfg: M.ModelConfig,
    cfg: TrainConfig,
    active: list[int],
    fold: int = 0,
    out_dir: Path | None = None,
) -> FoldResult:
    fit_ids, val_ids = D.holdout_subjects(train_ids, cfg.val_fraction, cfg.seed + fold)
    fit = WindowBank([sequences[s] for s in fit_ids], model_cfg.window_N)
    val = WindowBank([sequences[s] for s in val_ids], model_cfg.window_N)
    weights = fold_class_weights(fit.labels(), active)
    loss_cfg = L.LossConfig(weights=weights)
    model = M.build(model_cfg, seed=cfg.seed + 1000 * fold)
    params = list(model.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(cfg.seed + 7919 * fold)

    def val_f1() -> float:
        if not len(val):
            return float("nan")
        return metrics_from_predictions(predict(model, val, cfg.batch_size), val.labels(), cfg.threshold, active).avg_f1

    rows = [{
        "epoch": 0, "fold": fold, "lr": lr_at_epoch(0, cfg),
        "train_loss": mean_loss(model, fit, loss_cfg, cfg.batch_size), "val_avg_f1": val_f1(),
    }]
    log.info(_log_line(rows[0]))
    best = (-np.inf, 0, M.copy_state(model))
    stale = 0
    for e in range(cfg.epochs):
        lr = lr_at_epoch(e, cfg)
        order = rng.permutation(len(fit))
        losses = []
        for x, y in fit.batches(cfg.batch_size, order):
            loss, _ = batch_loss(model, x, y, loss_cfg, training=True)
            ad.zero_grad(p for _, p in params)
            ad.backward(loss)
            adam_step(params, state, lr)
            model.trained_steps += 1
            losses.append(loss.item() * len(x))
        f1 = val_f1()
        row = {"epoch": e + 1, "fold": fold, "lr": lr, "train_loss": float(np.sum(losses) / len(fit)), "val_avg_f1": f1}
        rows.append(row)
        log.info(_log_line(row))
        score = f1 if len(val) else float(e)
        if score > best[0]:
            best = (score, e + 1, M.copy_state(model))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    ad.zero_grad(p for _, p in params)
    M.restore_state(model, best[2])
    test_probs = {}
    for sid in test_ids:
        test_probs[sid] = predict(model, WindowBank([sequences[sid]], model_cfg.window_N), cfg.batch_size)
    result = FoldResult(fold, fit_ids, val_ids, list(test_ids), weights.tolist(), rows, best[1], test_probs, model)
    if out_dir is not None:
        fold_dir = Path(out_dir) / f"fold_{fold}"
        M.save_checkpoint(model, fold_dir, meta={
            "fold": fold, "best_epoch": best[1], "train_subjects": fit_ids,
            "val_subjects": val_ids, "test_subjects": list(test_ids), "class_weights": weights.tolist(),
        })
    return result


def train(
    sequences,
    folds: D.FoldSplit,
    model_cfg: M.ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    active: list[int] | None = None,
) -> TrainResult:
    """Cross-validated training: one model per fold, test predictions collated over folds."""
    seqs = {v.subject_id: v for v in sequences}
    all_ids = sorted(s for f in folds.folds for s in f)
    if sorted(seqs) != all_ids:
        raise ValueError("fold split does not cover exactly the dataset's subjects")
    if active is None:
        active = D.manifest_for(list(seqs.values())).active_aus()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results = []
    for k in range(len(folds)):
        train_ids, test_ids = folds.train_test(k)
        results.append(train_fold(seqs, train_ids, test_ids, model_cfg, cfg, active, k, out))
    report = collate(results, seqs, cfg.threshold, active)
    tr = TrainResult(results, report, active)
    if out is not None:
        write_run_outputs(tr, seqs, out)
    return tr


def collate(results: list[FoldResult], seqs, threshold: float, active) -> MetricsReport:
    probs, labels = [], []
    for r in results:
        for sid in r.test_subjects:
            probs.append(r.test_probs[sid])
            labels.append(seqs[sid].labels)
    return metrics_from_predictions(np.concatenate(probs), np.concatenate(labels), threshold, active)


def write_run_outputs(tr: TrainResult, seqs, out: Path) -> None:
    with open(out / "train_log.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,fold,lr,train_loss,val_avg_f1\n")
        for r in tr.folds:
            for row in r.log:
                fh.write(_log_line(row) + "\n")
    (out / "metrics.json").write_text(tr.report.to_json(), encoding="utf-8")
    folds_doc = {
        "active_aus": [D.AU_NAMES[i] for i in tr.active_aus],
        "folds": [
            {"fold": r.fold, "train": r.train_subjects, "val": r.val_subjects, "test": r.test_subjects,
             "best_epoch": r.best_epoch, "class_weights": r.class_weights}
            for r in tr.folds
        ],
    }
    (out / "folds.json").write_text(json.dumps(folds_doc, indent=2) + "\n", encoding="utf-8")
    write_matrix_csv(out / "coactivation.csv", np.asarray(tr.report.co_activation))
    for r in tr.folds:
        for sid in r.test_subjects:
            write_trace_csv(out / f"trace_{sid}.csv", trace_rows(seqs[sid].labels, r.test_probs[sid]))


# --- traces, heatmaps --------------------------------------------------------


def trace_rows(labels: np.ndarray, probs: np.ndarray) -> np.ndarray:
    frames = np.arange(len(labels))[:, None]
    return np.concatenate([frames, labels, probs], axis=1)


def temporal_trace(model: M.AULACaps, video: D.VideoSequence, batch_size: int = 24) -> np.ndarray:
    """Rows of (frame index, 12 true labels, 12 predicted probabilities)."""
    probs = predict(model, WindowBank([video], model.config.window_N), batch_size)
    return trace_rows(video.labels, probs)


def write_trace_csv(path, rows: np.ndarray) -> None:
    header = ["frame"] + [f"true_{n}" for n in D.AU_NAMES] + [f"prob_{n}" for n in D.AU_NAMES]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            truths = ",".join(str(int(v)) for v in row[1:13])
            probs = ",".join(f"{v:.6f}" for v in row[13:25])
            fh.write(f"{int(row[0])},{truths},{probs}\n")


def read_trace_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("au," + ",".join(D.AU_NAMES) + "\n")
        for name, row in zip(D.AU_NAMES, matrix):
            fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")


def transition_hits(labels: np.ndarray, probs: np.ndarray, tolerance: int = 3, threshold: float = 0.5):
    """Count true label transitions matched by a same-direction threshold crossing within ``tolerance`` frames."""
    labels = np.asarray(labels).astype(int)
    pred = (np.asarray(probs) >= threshold).astype(int)
    hits = total = 0
    for t in np.flatnonzero(np.diff(labels) != 0) + 1:
        direction = labels[t] - labels[t - 1]
        total += 1
        crossings = np.flatnonzero(np.diff(pred) == direction) + 1
        if crossings.size and np.min(np.abs(crossings - t)) <= tolerance:
            hits += 1
    return hits, total


def reconstruct_frames(model: M.AULACaps, video: D.VideoSequence, frames) -> tuple[np.ndarray, np.ndarray]:
    """Frames of interest and their decoder reconstructions (masked by predicted AUs)."""
    rows = D.window_indices(len(video), model.config.window_N)
    x = video.frames[rows[list(frames)]]
    with ad.no_grad():
        res = M.forward(model, x, training=False)
    originals = x[:, model.config.window_N, :, :, 0]
    return originals, res.reconstruction.data[:, 0]


# --- saliency ----------------------------------------------------------------


def guided_backprop_saliency(model: M.AULACaps, window, au_index: int) -> np.ndarray:
    """Guided-backprop map of one AU probability w.r.t. the frame of interest, scaled to [0, 1]."""
    cfg = model.config
    if not 0 <= au_index < cfg.au_count:
        raise ValueError(f"au_index must be in 0..{cfg.au_count - 1}, got {au_index}")
    model.eval()
    x = Tensor(np.asarray(window, dtype=np.float32), requires_grad=True)
    tape = ad.Tape()
    with ad.use_tape(tape), ad.guided_rectifiers():
        u = model.primary(x)
        v, _ = caps.route(u, model.votes, cfg.routing_iterations)
        p = caps.capsule_lengths(v)
        target = ad.reshape(p, (-1,))[au_index]
        ad.backward(target)
    params = model.parameters()
    ad.zero_grad(params)
    g = x.grad
    if g is None:
        return np.zeros((cfg.input_size, cfg.input_size), dtype=np.float32)
    g = g.reshape((cfg.window_length, cfg.input_size, cfg.input_size, -1))[cfg.window_N].sum(axis=-1)
    sal = np.maximum(g, 0.0)
    peak = sal.max()
    return (sal / peak if peak > 0 else sal).astype(np.float32)


def saliency_centroid(sal: np.ndarray) -> tuple[float, float]:
    total = sal.sum()
    if total <= 0:
        return float("nan"), float("nan")
    yy, xx = np.mgrid[0 : sal.shape[0], 0 : sal.shape[1]]
    return float((xx * sal).sum() / total), float((yy * sal).sum() / total)


def saliency_hits_region(sal: np.ndarray, au_id: int) -> bool:
    """Whether the saliency centroid lies in the AU's blob region.

    Bilateral AUs have one blob per face half; their whole-map centroid sits on
    the midline between the blobs, so each half is tested separately.
    """
    size = sal.shape[0]
    region = D.blob_region(au_id, size)
    centres = D.AU_REGIONS[au_id]
    if len(centres) == 1:
        parts = [sal]
    else:
        half = size // 2
        left, right = sal.copy(), sal.copy()
        left[:, half:] = 0
        right[:, :half] = 0
        parts = [left, right]
    for part in parts:
        cx, cy = saliency_centroid(part)
        if not np.isfinite(cx):
            return False
        if not region[int(round(cy)), int(round(cx))]:
            return False
    return True


# --- ablations ---------------------------------------------------------------


def train_head(
    head: M.StreamHead, fit: WindowBank, val: WindowBank, loss_cfg: L.LossConfig, cfg: TrainConfig,
    active: list[int], seed: int = 0,
) -> M.StreamHead:
    """Fit only the head's vote transform on cached frozen-stream capsules."""

    def cache(bank):
        return [(head.frozen_capsules(x).data, y) for x, y in bank.batches(cfg.batch_size)]

    fit_x, fit_y = _cat(cache(fit))
    val_cache = cache(val) if len(val) else []
    params = list(head.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(seed)

    def val_f1():
        if not val_cache:
            return float("nan")
        with ad.no_grad():
            probs = np.concatenate([head.route_probs(Tensor(u)).data for u, _ in val_cache])
        labels = np.concatenate([y for _, y in val_cache])
        return metrics_from_predictions(probs, labels, cfg.threshold, active).avg_f1

    best = (-np.inf, head.votes.W.data.copy())
    stale = 0
    for e in range(cfg.epochs):
        lr = lr_at_epoch(e, cfg)
        order = rng.permutation(len(fit_x))
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            probs = head.route_probs(Tensor(fit_x[rows]))
            loss = L.margin_loss(probs, fit_y[rows], loss_cfg)
            ad.zero_grad(p for _, p in params)
            ad.backward(loss)
            adam_step(params, state, lr)
        score = val_f1() if val_cache else float(e)
        if score > best[0]:
            best, stale = (score, head.votes.W.data.copy()), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    head.votes.W.data = best[1]
    head.votes.W.grad = None
    return head


def _cat(pairs):
    return np.concatenate([u for u, _ in pairs]), np.concatenate([y for _, y in pairs])


def ablate_fold(fold: FoldResult, sequences, stream: str, cfg: TrainConfig, active) -> dict[str, np.ndarray]:
    """Train a fresh AU capsule layer on one frozen stream; return test-subject probabilities."""
    model = fold.model
    N = model.config.window_N
    head = M.stream_head_for_ablation(model, stream, seed=cfg.seed + 31 * fold.fold)
    fit = WindowBank([sequences[s] for s in fold.train_subjects], N)
    val = WindowBank([sequences[s] for s in fold.val_subjects], N)
    loss_cfg = L.LossConfig(weights=np.asarray(fold.class_weights))
    train_head(head, fit, val, loss_cfg, cfg, active, seed=cfg.seed + fold.fold)
    out = {}
    with ad.no_grad():
        for sid in fold.test_subjects:
            bank = WindowBank([sequences[sid]], N)
            out[sid] = np.concatenate([head(x).data for x, _ in bank.batches(cfg.batch_size)])
    return out


def ablate(result: TrainResult, sequences, stream: str, cfg: TrainConfig) -> MetricsReport:
    """Stream-only ablation collated over the same folds as the full model."""
    seqs = {v.subject_id: v for v in sequences} if not isinstance(sequences, dict) else sequences
    probs, labels = [], []
    for fold in result.folds:
        preds = ablate_fold(fold, seqs, stream, cfg, result.active_aus)
        for sid in fold.test_subjects:
            probs.append(preds[sid])
            labels.append(seqs[sid].labels)
    return metrics_from_predictions(np.concatenate(probs), np.concatenate(labels), cfg.threshold, result.active_aus)


def load_run(run_dir, sequences) -> TrainResult:
    """Rebuild a :class:`TrainResult` from a run directory's checkpoints and fold file."""
    run_dir = Path(run_dir)
    doc = json.loads((run_dir / "folds.json").read_text(encoding="utf-8"))
    seqs = {v.subject_id: v for v in sequences}
    active = [D.AU_NAMES.index(n) for n in doc["active_aus"]]
    folds = []
    for f in doc["folds"]:
        model = M.load_checkpoint(run_dir / f"fold_{f['fold']}")
        bank_probs = {
            sid: predict(model, WindowBank([seqs[sid]], model.config.window_N)) for sid in f["test"]
        }
        folds.append(FoldResult(f["fold"], f["train"], f["val"], f["test"], f["class_weights"], [],
                                f["best_epoch"], bank_probs, model))
    report = collate(folds, seqs, 0.5, active)
    return TrainResult(folds, report, active)
