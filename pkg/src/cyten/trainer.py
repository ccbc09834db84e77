"""Subject-grouped cohort splitting and the Adam/BCE training loop.

Splits shuffle subjects with a seeded permutation, rotate the list by
floor(n / folds) positions per fold, and cut [train | val | test] blocks
at the 65/15/20 fractions; every session and modality of a subject lands
in its subject's partition, so leakage is impossible by construction.

Training is deterministic for a fixed seed: per-epoch shuffling and the
per-sample augmentation draw both derive from counter-based seed
sequences, and all reductions are fixed-order.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .errors import TrainingDiverged, ValidationError
from .models import apply_checkpoint, config_digest
from .preprocess import N_AUGMENTS, augment, channelize_adc
from .tensor import AdamState, Tensor, adam_step
from .volume_io import Checkpoint, read_mvol

MIN_EPOCHS = 300


@dataclass
class SplitSpec:
    train_fraction: float = 0.65
    val_fraction: float = 0.15
    test_fraction: float = 0.20
    folds: int = 3
    seed: int = 0

    def __post_init__(self):
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValidationError("bad fractions", f"split fractions must sum to 1, got {total}")
        if self.folds < 1:
            raise ValidationError("bad folds", f"folds must be >= 1, got {self.folds}")


@dataclass
class Split:
    fold: int
    seed: int
    assignments: dict  # subject_id -> "train" | "val" | "test"

    def subjects(self, partition):
        return sorted(s for s, p in self.assignments.items() if p == partition)

    def to_json(self):
        return json.dumps({"fold": self.fold, "seed": self.seed, "assignments": self.assignments},
                          sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(fold=d["fold"], seed=d["seed"], assignments=d["assignments"])


def split_cohort(manifest, spec, fold):
    """Partition assignment per subject for one cross-validation fold."""
    if not manifest.records:
        raise ValidationError("empty manifest", "cannot split an empty manifest")
    if not 0 <= fold < spec.folds:
        raise ValidationError("bad fold", f"fold must be in [0,{spec.folds - 1}], got {fold}")
    for r in manifest.records:
        if r.ce_label is None:
            raise ValidationError("missing label", f"record {r.key} has no ce_label; labels are required for splitting")
    subjects = sorted({r.subject_id for r in manifest.records})
    n = len(subjects)
    if n < 5:
        raise ValidationError("too few subjects", f"need at least 5 subjects to realize the fractions, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    perm = [subjects[i] for i in rng.permutation(n)]
    rot = (fold * (n // spec.folds)) % n
    rotated = perm[rot:] + perm[:rot]
    n_test = round(spec.test_fraction * n)
    n_val = round(spec.val_fraction * n)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValidationError("too few subjects", f"fractions give empty partitions for n={n}")
    assignments = {}
    for i, s in enumerate(rotated):
        if i < n_train:
            assignments[s] = "train"
        elif i < n_train + n_val:
            assignments[s] = "val"
        else:
            assignments[s] = "test"
    return Split(fold=fold, seed=spec.seed, assignments=assignments)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    x: np.ndarray  # [C,D,H,W] float32
    label: int
    subject_id: str
    session_id: str
    path: str


def load_samples(manifest, modality, base_dir=".", subjects=None, require_labels=True):
    """Materialize network-ready samples for one modality.

    DWI volumes become [1,D,H,W]; ADC volumes are replicated to
    [3,D,H,W]. Relative manifest paths resolve against base_dir.
    """
    import os

    picked = manifest.filter(subjects=subjects, modality=modality)
    samples = []
    for r in picked.records:
        if require_labels and r.ce_label is None:
            raise ValidationError("missing label", f"record {r.key} has no ce_label")
        path = r.path if os.path.isabs(r.path) else os.path.join(base_dir, r.path)
        vol = read_mvol(path)
        x = channelize_adc(vol) if modality == "ADC" else vol.voxels[None, ...]
        samples.append(TrainSample(x=np.ascontiguousarray(x, dtype=np.float32),
                                   label=0 if r.ce_label is None else int(r.ce_label),
                                   subject_id=r.subject_id, session_id=r.session_id, path=r.path))
    return samples


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = MIN_EPOCHS
    batch_size: int = 4
    val_every_steps: int = 100
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    deterministic: bool = True
    dev: bool = False

    def __post_init__(self):
        if self.val_every_steps < 1:
            raise ValidationError("bad config", f"val_every_steps must be >= 1, got {self.val_every_steps}")
        if self.batch_size < 1:
            raise ValidationError("bad config", f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < MIN_EPOCHS and not self.dev:
            raise ValidationError("bad config", f"epochs must be >= {MIN_EPOCHS} outside the dev profile, got {self.epochs}")


@dataclass
class HistoryPoint:
    step: int
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    points: list = field(default_factory=list)

    def to_jsonl(self):
        return "".join(json.dumps(asdict(p), sort_keys=True) + "\n" for p in self.points)

    @classmethod
    def from_jsonl(cls, text):
        return cls(points=[HistoryPoint(**json.loads(line)) for line in text.splitlines() if line.strip()])

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for p in self.points:
            writer.writerow([p.step, p.epoch, repr(p.train_loss), repr(p.train_acc),
                             repr(p.val_loss), repr(p.val_acc)])
        return buf.getvalue()


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: TrainHistory


def _augment_id(seed, epoch, sample_index):
    # counter-based so prefetch order can never change the draw
    state = np.random.SeedSequence([seed, epoch, sample_index]).generate_state(1)[0]
    return int(state % N_AUGMENTS)


def _bce_numpy(p, y):
    pc = np.clip(p, ops.BCE_CLAMP_EPS, 1.0 - ops.BCE_CLAMP_EPS)
    return -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))


def evaluate(network, samples, batch_size=4):
    """Eval-mode mean BCE and accuracy over a sample list."""
    ys = np.array([s.label for s in samples], dtype=np.float64)
    ps = []
    for i in range(0, len(samples), batch_size):
        xs = np.stack([s.x for s in samples[i:i + batch_size]])
        ps.append(network.predict_proba(xs, batch_size=batch_size))
    p = np.concatenate(ps).astype(np.float64)
    return float(_bce_numpy(p, ys).mean()), float(((p >= 0.5).astype(np.int64) == ys).mean())


def _snapshot(network):
    return {name: arr.copy() for name, arr in network.state_tensors().items()}


def _metadata(network, config, epoch):
    # the full architecture config rides along so checkpoints are self-describing
    return {"seed": config.seed, "epoch": epoch,
            "config_digest": config_digest(network.config),
            "config": asdict(network.config)}


def _checkpoint(network, config, epoch):
    return Checkpoint(network_kind=network.kind,
                      tensors=_snapshot(network),
                      metadata=_metadata(network, config, epoch))


def train(network, train_set, val_set, config, warm_start=None, head_only_reset=False):
    """Run the full loop; returns TrainResult(final, best, history).

    Raises TrainingDiverged (carrying the last good checkpoint) when the
    loss goes non-finite.
    """
    if not train_set:
        raise ValidationError("empty training set", "no training samples")
    if not val_set:
        raise ValidationError("empty validation set", "no validation samples")
    if len({s.label for s in train_set}) < 2:
        raise ValidationError("single-class training set", "training set must contain both classes")
    overlap = {s.subject_id for s in train_set} & {s.subject_id for s in val_set}
    if overlap:
        raise ValidationError("subject leakage", f"subjects in both train and val: {sorted(overlap)[:4]}")
    if warm_start is not None:
        apply_checkpoint(network, warm_start, head_only_reset=head_only_reset)

    params = network.parameters()
    states = {p.name: AdamState.for_param(p, lr=config.lr, beta1=config.beta1,
                                          beta2=config.beta2, eps=config.eps) for p in params}
    history = TrainHistory()
    last_good = _snapshot(network)
    best_tensors = None
    best_loss = np.inf
    best_epoch = 0
    step = 0
    win_losses = []
    win_correct = 0
    win_count = 0

    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(np.random.SeedSequence([config.seed, epoch])).permutation(len(train_set))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xs = []
            for i in idx:
                s = train_set[int(i)]
                x = augment(s.x, _augment_id(config.seed, epoch, int(i))) if config.augment else s.x
                xs.append(x)
            xb = np.stack(xs)
            yb = np.array([train_set[int(i)].label for i in idx], dtype=np.int64)
            probs = network.forward(Tensor(xb), mode="train")
            p_pos = ops.take_column(probs, 1)
            loss = ops.bce_loss(p_pos, yb)
            lval = loss.item()
            if not np.isfinite(lval):
                meta = dict(_metadata(network, config, epoch), diverged_at_step=step + 1)
                ckpt = Checkpoint(network_kind=network.kind, tensors=last_good, metadata=meta)
                raise TrainingDiverged(f"loss became non-finite at step {step + 1}", checkpoint=ckpt)
            for p in params:
                p.zero_grad()
            loss.backward()
            for p in params:
                adam_step(p, states[p.name])
            step += 1
            win_losses.append(lval)
            win_correct += int(((p_pos.data >= 0.5).astype(np.int64) == yb).sum())
            win_count += len(idx)
            if step % config.val_every_steps == 0:
                val_loss, val_acc = evaluate(network, val_set, config.batch_size)
                history.points.append(HistoryPoint(
                    step=step, epoch=epoch,
                    train_loss=float(np.mean(win_losses)),
                    train_acc=win_correct / max(win_count, 1),
                    val_loss=val_loss, val_acc=val_acc))
                win_losses = []
                win_correct = 0
                win_count = 0
                last_good = _snapshot(network)
                if val_loss < best_loss:
                    best_loss = val_loss
                    best_tensors = last_good
                    best_epoch = epoch

    final = _checkpoint(network, config, config.epochs)
    if best_tensors is None:
        best = final
    else:
        best = Checkpoint(network_kind=network.kind, tensors=best_tensors,
                          metadata=_metadata(network, config, best_epoch))
    return TrainResult(final=final, best=best, history=history)
