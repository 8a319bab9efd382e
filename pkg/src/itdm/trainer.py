"""Training loop: cross-entropy SGD with an optional feature-matching term.

Each step draws two mini-batches. The first drives the cross-entropy; both are
pushed through the extractor and their features matched with MMD. The two
backward passes are summed and applied as a single momentum step.
"""

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from itdm import data as data_mod
from itdm.mmd import FeatureBatch, match_class_conditional, match_joint
from itdm.nn import (
    Optimizer,
    add_grads,
    backward,
    default_architectures,
    forward,
    sgd_momentum_step,
    softmax_cross_entropy,
)
from itdm.tensor import make_rng

log = logging.getLogger(__name__)

MATCH_MODES = ("none", "joint", "class")
LAMBDA_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)
DIVERGENCE_FACTOR = 10.0
METRICS_COLUMNS = (
    "epoch", "step", "train_ce", "match_loss", "sigma_med",
    "test_ce", "test_acc", "classes_matched", "wall_ms",
)


@dataclass
class TrainConfig:
    match_mode: str = "class"
    lam: float = 0.6
    use_sqrt: bool = True
    kernels: int = 5
    batch_size: int = 150
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.5
    lr_schedule: tuple = ((20, 0.2), (40, 0.2))
    seed: int = 0
    arch: str = "mlp"
    feature_dim: int = 64
    dataset: str = "blobs"
    train_images: str = None
    train_labels: str = None
    test_images: str = None
    test_labels: str = None
    subset_n: int = None
    blob_classes: int = 4
    blob_per_class: int = 250
    blob_dim: int = 8
    blob_separation: float = 3.0
    eval_batch: int = 1000

    def __post_init__(self):
        self.lr_schedule = tuple((int(e), float(m)) for e, m in self.lr_schedule)
        self.validate()

    def validate(self):
        if self.match_mode not in MATCH_MODES:
            raise ValueError(f"match_mode must be one of {MATCH_MODES}, got {self.match_mode!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be a finite non-negative number, got {self.lam}")
        if self.kernels < 1:
            raise ValueError("need at least one kernel")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be positive and momentum in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.subset_n is not None and self.subset_n < 1:
            raise ValueError("subset_n must be positive")
        if any(m <= 0 for _, m in self.lr_schedule):
            raise ValueError("learning-rate multipliers must be positive")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepMetrics:
    train_ce: float
    match_loss: float = 0.0
    sigma_med: float = 0.0
    classes_matched: int = 0
    match: object = None


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    train_ce: float
    match_loss: float
    sigma_med: float
    test_ce: float = None
    test_acc: float = None
    classes_matched: int = 0
    wall_ms: float = 0.0


class TrainingDiverged(RuntimeError):
    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass
class TrainResult:
    records: list
    model: object
    final_train_ce: float
    final_train_acc: float
    wall_ms: float
    evaluations: list = field(default_factory=list)


def compute_match(h1, y1, h2, y2, cfg, num_classes, sigma_override=None):
    b1, b2 = FeatureBatch(h1, y1), FeatureBatch(h2, y2)
    if cfg.match_mode == "joint":
        return match_joint(b1, b2, cfg.kernels, cfg.use_sqrt, sigma_med=sigma_override)
    if cfg.match_mode == "class":
        return match_class_conditional(
            b1, b2, num_classes, cfg.kernels, cfg.use_sqrt, class_sigmas=sigma_override
        )
    raise ValueError(f"no match loss for mode {cfg.match_mode!r}")


def itdm_gradients(model, s1, s2, cfg, sigma_override=None):
    """Parameter gradients of ``CE(s1) + lam * Match(H1, H2)`` and the step metrics.

    ``s1`` and ``s2`` are ``(x, labels)`` pairs. The labels of ``s2`` are only
    used to partition features in class-conditional mode. ``sigma_override``
    freezes the bandwidth (a float for joint mode, a class-to-float dict for
    class mode).
    """
    x1, y1 = s1
    cache1, h1, logits1 = forward(model, x1)
    ce, dlogits = softmax_cross_entropy(logits1, y1)
    metrics = StepMetrics(train_ce=ce)
    if cfg.match_mode == "none":
        return backward(model, cache1, dlogits), metrics

    x2, y2 = s2
    cache2, h2, _ = forward(model, x2)
    match = compute_match(h1, y1, h2, y2, cfg, model.num_classes, sigma_override)
    metrics.match_loss = match.loss
    metrics.sigma_med = match.sigma_med
    metrics.classes_matched = match.classes_matched
    metrics.match = match
    if cfg.lam == 0:
        return backward(model, cache1, dlogits), metrics
    grads = add_grads(
        backward(model, cache1, dlogits, cfg.lam * match.grad_h1),
        backward(model, cache2, None, cfg.lam * match.grad_h2),
    )
    return grads, metrics


def itdm_objective(model, s1, s2, cfg, sigma_override=None):
    """Scalar ``CE(s1) + lam * Match`` (no gradients); used for finite-difference checks."""
    _, h1, logits1 = forward(model, s1[0])
    ce, _ = softmax_cross_entropy(logits1, s1[1])
    if cfg.match_mode == "none" or cfg.lam == 0:
        return ce
    _, h2, _ = forward(model, s2[0])
    match = compute_match(h1, s1[1], h2, s2[1], cfg, model.num_classes, sigma_override)
    return ce + cfg.lam * match.loss


def itdm_step(model, optimizer, s1, s2, cfg):
    """One combined update; with mode ``none`` or ``lam == 0`` this is plain SGD on CE."""
    grads, metrics = itdm_gradients(model, s1, s2, cfg)
    sgd_momentum_step(optimizer, model, grads)
    return metrics


def evaluate(model, dataset, batch_size=1000):
    """Accuracy and mean cross-entropy over the whole dataset."""
    n = len(dataset)
    if n == 0:
        return float("nan"), float("nan")
    correct = 0
    ce_sum = 0.0
    for start in range(0, n, batch_size):
        x = dataset.x[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        _, _, logits = forward(model, x)
        ce, _ = softmax_cross_entropy(logits, y)
        ce_sum += ce * y.size
        correct += int(np.sum(logits.argmax(axis=1) == y))
    return correct / n, ce_sum / n


def lr_multiplier(schedule, epoch_index):
    """Cumulative multiplier in force for 0-based ``epoch_index``."""
    mult = 1.0
    for at, m in schedule:
        if epoch_index >= at:
            mult *= m
    return mult


def train(cfg, train_data, test_data, callback=None):
    """Run the full schedule; evaluates on ``test_data`` at the end of every epoch.

    ``callback`` (if given) receives each :class:`MetricsRecord` as it is produced.
    Raises :class:`TrainingDiverged` if the training CE goes non-finite or
    exceeds ten times its first value.
    """
    root = make_rng(cfg.seed)
    init_rng, sampler_rng = root.spawn(2)
    model = default_architectures(
        cfg.arch, train_data.sample_shape, cfg.feature_dim, train_data.num_classes, init_rng
    )
    optimizer = Optimizer.for_model(model, cfg.lr, cfg.momentum)
    sampler = data_mod.DualBatchSampler(len(train_data), cfg.batch_size, sampler_rng)
    records = []
    evaluations = []
    initial_ce = None
    step = 0
    t_start = time.perf_counter()

    def emit(rec):
        records.append(rec)
        if callback is not None:
            callback(rec)

    for epoch in range(cfg.epochs):
        optimizer.lr = cfg.lr * lr_multiplier(cfg.lr_schedule, epoch)
        for idx1, idx2 in sampler.epoch():
            t0 = time.perf_counter()
            s1 = (train_data.x[idx1], train_data.labels[idx1])
            s2 = (train_data.x[idx2], train_data.labels[idx2])
            grads, m = itdm_gradients(model, s1, s2, cfg)
            step += 1
            if initial_ce is None:
                initial_ce = m.train_ce
            bad = not (np.isfinite(m.train_ce) and np.isfinite(m.match_loss))
            if bad or m.train_ce > DIVERGENCE_FACTOR * initial_ce:
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch + 1} step {step}: "
                    f"train_ce={m.train_ce} (initial {initial_ce}), match_loss={m.match_loss}",
                    records,
                )
            sgd_momentum_step(optimizer, model, grads)
            rec = MetricsRecord(
                epoch + 1, step, m.train_ce, m.match_loss, m.sigma_med,
                classes_matched=m.classes_matched,
                wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
            if sampler.epoch_done:
                rec.test_acc, rec.test_ce = evaluate(model, test_data, cfg.eval_batch)
                evaluations.append((rec.test_acc, rec.test_ce))
                log.info("epoch %d: train_ce %.4f test_ce %.4f test_acc %.4f",
                         epoch + 1, m.train_ce, rec.test_ce, rec.test_acc)
            emit(rec)

    train_acc, train_ce = evaluate(model, train_data, cfg.eval_batch)
    return TrainResult(
        records, model, train_ce, train_acc,
        (time.perf_counter() - t_start) * 1000.0, evaluations,
    )


def summarize(cfg, result, window=10):
    """Summary dict: config echo, final metrics, and averages over the last ``window`` evaluations."""
    evals = result.evaluations[-window:]
    summary = {
        "config": cfg.to_dict(),
        "steps": len(result.records),
        "epochs_completed": len(result.evaluations),
        "final_train_ce": result.final_train_ce,
        "final_train_acc": result.final_train_acc,
        "final_test_acc": result.evaluations[-1][0] if evals else None,
        "final_test_ce": result.evaluations[-1][1] if evals else None,
        "last_evals": len(evals),
        "avg_test_acc": float(np.mean([a for a, _ in evals])) if evals else None,
        "avg_test_ce": float(np.mean([c for _, c in evals])) if evals else None,
    }
    return summary


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_metrics_csv(records, path, include_timing=False):
    """Write records as CSV. ``wall_ms`` is left blank unless ``include_timing`` so reruns are byte-identical."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            row = dataclasses.asdict(r)
            if not include_timing:
                row["wall_ms"] = None
            w.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


def read_metrics_csv(path):
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        for row in reader:
            def num(key, cast=float):
                return cast(row[key]) if row[key] != "" else None
            out.append(MetricsRecord(
                num("epoch", int), num("step", int), num("train_ce"), num("match_loss"),
                num("sigma_med"), num("test_ce"), num("test_acc"),
                num("classes_matched", int), num("wall_ms") or 0.0,
            ))
    return out


def load_datasets(cfg, data_dir=None):
    """Training and test :class:`~itdm.data.Dataset` for ``cfg``.

    ``blobs`` is generated from the run seed. IDX datasets come from the paths
    in ``cfg`` or from ``$ITDM_DATA_DIR``. ``subset_n`` draws a seeded subset of
    the training set; the test set is always used whole.
    """
    data_rng = make_rng(cfg.seed).spawn(3)[2]
    if cfg.dataset == "blobs":
        train_rng, test_rng = data_rng.spawn(2)
        args = (cfg.blob_classes, cfg.blob_per_class, cfg.blob_dim, cfg.blob_separation)
        train_ds = data_mod.synthetic_blobs(*args, train_rng, name="blobs-train")
        test_ds = data_mod.synthetic_blobs(*args, test_rng, name="blobs-test")
    elif cfg.dataset in ("fmnist", "kmnist"):
        paths = {
            "train_images": cfg.train_images, "train_labels": cfg.train_labels,
            "test_images": cfg.test_images, "test_labels": cfg.test_labels,
        }
        if not all(paths.values()):
            found = data_mod.find_idx_files(cfg.dataset, data_dir)
            if found is None:
                raise FileNotFoundError(
                    f"no IDX files for {cfg.dataset}: pass --train-images/--train-labels/"
                    f"--test-images/--test-labels or set ${data_mod.DATA_DIR_ENV}"
                )
            paths = {k: paths[k] or str(v) for k, v in found.items()}
        train_ds = data_mod.load_idx(paths["train_images"], paths["train_labels"], 10, f"{cfg.dataset}-train")
        test_ds = data_mod.load_idx(paths["test_images"], paths["test_labels"], 10, f"{cfg.dataset}-test")
    else:
        raise ValueError(f"unknown dataset {cfg.dataset!r}")
    if cfg.subset_n is not None and cfg.subset_n < len(train_ds):
        idx = np.sort(data_rng.permutation(len(train_ds))[:cfg.subset_n])
        train_ds = train_ds.subset(idx)
    return train_ds, test_ds
