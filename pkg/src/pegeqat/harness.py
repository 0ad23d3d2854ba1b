"""Training loop, evaluation, and metrics output.

One trainer thread owns the model. The only other thread is the optional
batch prefetcher. With prefetching off, a run is a pure function of its
config and seed, so the metrics CSV and checkpoints are byte-identical
across reruns. In that mode the ``secs`` column is written as 0 and the
wall-clock times go to ``timing.csv``.
"""

from __future__ import annotations

import contextlib
import csv
import io
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .curriculum import Granularity, ReplacementState, ScheduleFamily, ScheduleSpec, lr_at, mu_at, replacement_rate_at
from .data import BatchIterator, Dataset, load_dataset, prefetch
from .errors import ConfigError, ContractError, NonFiniteError
from .estimators import EstimatorConfig, EstimatorKind
from .models import Mode, Model, ModelSpec, QuantConfig, build_model, forward_quantized, init_from_pretrained
from .optim import SGD, Adam

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "train_loss", "train_acc", "test_acc", "p_t", "mu_t", "lr", "disc_err_mean", "secs")


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    train_loss: float
    train_acc: float
    test_acc: float
    p_t: float
    mu_t: float
    lr: float
    disc_err: list = field(default_factory=list)
    secs: float = 0.0

    def __post_init__(self):
        for name in ("train_acc", "test_acc"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0) and not np.isnan(v):
                raise ContractError(f"{name}={v} outside [0, 100]")
        if any(e < 0 for e in self.disc_err):
            raise ContractError("discretization errors must be >= 0")

    @property
    def disc_err_mean(self) -> float:
        return float(np.mean(self.disc_err)) if self.disc_err else 0.0

    def row(self) -> list:
        vals = [self.train_loss, self.train_acc, self.test_acc, self.p_t, self.mu_t, self.lr, self.disc_err_mean, self.secs]
        return [str(self.epoch), str(self.step)] + [f"{v:.6f}" for v in vals]


@dataclass
class TrainResult:
    model: Model
    metrics: list
    best_acc: float
    best_epoch: int
    steps: int
    optimizer: object = None
    schedule: Optional[ScheduleSpec] = None


def emit_metrics(series: Sequence[MetricsRecord], path: str) -> None:
    """Write ``series`` as CSV (header plus one row per record, 6 decimals)."""
    if not series:
        raise ContractError("empty metrics series")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for rec in series:
        w.writerow(rec.row())
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def evaluate(model: Model, dataset: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy (%) of the fully quantized EVAL forward; argmax ties go to the lowest class."""
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, n, batch_size):
        x = dataset.images[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        logits = forward_quantized(model, x, 0, Mode.EVAL)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    return 100.0 * correct / n


@contextlib.contextmanager
def thread_limit(n: Optional[int] = None):
    """Cap BLAS/OpenMP threads at ``n`` (default: ``PEGE_THREADS``, unset = no cap)."""
    if n is None:
        env = os.environ.get("PEGE_THREADS", "").strip()
        if not env:
            yield
            return
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"PEGE_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError(f"thread cap must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# -- config -> components -----------------------------------------------------


def _enum_name(v: str) -> str:
    return str(v).strip().upper()


def estimator_from(cfg: TrainConfig) -> EstimatorConfig:
    return EstimatorConfig(kind=_enum_name(cfg["estimator.kind"]), mu=0.0, delta=cfg["estimator.delta"])


def replacement_family(cfg: TrainConfig) -> ScheduleFamily:
    fam = _enum_name(cfg["replace.family"])
    if fam == "AUTO":
        # progressive replacement belongs to PEGE; baselines quantize everything from step 0
        kind = _enum_name(cfg["estimator.kind"])
        return ScheduleFamily.LOGARITHMIC if kind == "PEGE" else ScheduleFamily.NONE
    return ScheduleFamily(fam)


def schedule_from(cfg: TrainConfig, total_steps: int) -> ScheduleSpec:
    kw = dict(
        family=replacement_family(cfg),
        p0=cfg["replace.p0"],
        base=cfg["replace.base"],
        p_const=cfg["replace.p_const"],
        mu_family=_enum_name(cfg["mu.family"]),
        mu_max=cfg["estimator.mu_max"],
    )
    if cfg["estimator.k_mu"] is not None:
        kw["k_mu"] = cfg["estimator.k_mu"]
    return ScheduleSpec.for_run(total_steps, t_full_frac=cfg["replace.t_full_frac"], **kw)


def model_spec_from(cfg: TrainConfig, train: Dataset) -> ModelSpec:
    bits_w, bits_a = cfg["quant.bits_w"], cfg["quant.bits_a"]
    round_family = _enum_name(cfg["quant.round_family"])
    quant = QuantConfig(
        clip_family=_enum_name(cfg["quant.clip_family"]),
        weight_round_family="WEIGHT" if round_family == "AUTO" else round_family,
        bits_w=bits_w,
        bits_a=bits_a,
        pact_init_m=cfg["quant.pact_init_m"],
    )
    classes = cfg["model.classes"]
    classes = train.classes if classes is None else int(classes)
    if classes < train.classes:
        raise ConfigError(f"model.classes={classes} but the dataset has {train.classes} classes")
    return ModelSpec(
        arch=_enum_name(cfg["model.arch"]),
        width=cfg["model.width"],
        num_classes=classes,
        in_shape=tuple(train.images.shape[1:]),
        quant=quant,
        seed=cfg["train.seed"],
    )


def optimizer_from(cfg: TrainConfig, model: Model):
    name = cfg["train.optimizer"].lower()
    if name == "adam":
        return Adam(model.named_parameters(), betas=(cfg["train.beta1"], cfg["train.beta2"]), weight_decay=cfg["train.weight_decay"])
    return SGD(model.named_parameters(), cfg["train.momentum"], cfg["train.nesterov"], cfg["train.weight_decay"])


def load_data(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    train, test = load_dataset(
        cfg["data.name"],
        cfg["data.dir"] or None,
        synth_n=cfg["data.synth_n"],
        synth_classes=cfg["data.synth_classes"],
        seed=cfg["train.seed"],
    )
    return train.subset(cfg["data.subset_n"]), test


# -- training -----------------------------------------------------------------


def _write_diagnostic(out_dir: Optional[str], T: int, epoch: int, exc: Exception, extra: dict) -> None:
    msg = f"non-finite value at step {T} (epoch {epoch}): {exc}"
    log.error(msg)
    if out_dir:
        with open(os.path.join(out_dir, "nan_abort.txt"), "w") as fh:
            fh.write(msg + "\n")
            for k, v in sorted(extra.items()):
                fh.write(f"{k} = {v}\n")


def train(
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    prefetch_batches: bool = True,
    datasets: Optional[tuple[Dataset, Dataset]] = None,
    model: Optional[Model] = None,
) -> TrainResult:
    """Train per ``cfg``; returns the final model and the metrics series.

    Each global step ``T``: batch -> TRAIN forward at ``T`` (replacement
    masks at ``p_T``, PEGE correction at ``mu_T``) -> cross entropy ->
    backward -> optimizer step on latent weights and quantizer parameters.
    Evaluation every ``train.eval_period`` epochs (and after the last)
    appends a record; checkpoints go to ``out_dir`` at the best test
    accuracy (ties: latest) and at the end.
    """
    with thread_limit():
        return _train(cfg, out_dir, prefetch_batches, datasets, model)


def _train(cfg, out_dir, prefetch_batches, datasets, model) -> TrainResult:
    train_set, test_set = datasets if datasets is not None else load_data(cfg)
    seed = cfg["train.seed"]
    if model is None:
        model = build_model(model_spec_from(cfg, train_set))
        if cfg["model.pretrained_path"]:
            init_from_pretrained(model, cfg["model.pretrained_path"])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    augment = cfg["data.augment"] and train_set.name == "cifar10"
    it = BatchIterator(train_set, cfg["data.batch"], shuffle=True, seed=seed, augment=augment)
    epochs = cfg["train.epochs"]
    total = epochs * it.steps_per_epoch()
    if cfg["train.max_steps"] >= 0:
        total = min(total, cfg["train.max_steps"])
    schedule = schedule_from(cfg, total)
    estimator = estimator_from(cfg)
    granularity = Granularity(_enum_name(cfg["replace.granularity"]))
    replacement = ReplacementState(rng_seed=seed, granularity=granularity)
    optimizer = optimizer_from(cfg, model)
    eta0 = cfg["train.lr"]
    t_max = max(total - 1, 1)
    deterministic = not prefetch_batches
    metrics: list[MetricsRecord] = []
    timings: list[tuple[int, float]] = []
    best_acc, best_epoch = -1.0, -1

    if total == 0:
        return TrainResult(model, metrics, best_acc, best_epoch, 0, optimizer, schedule)

    if not model.calibrated:
        first = it.order(0)[: cfg["data.batch"]]
        model.calibrate(train_set.images[first])

    def state(step):
        return {"step": step, "seed": seed, "optimizer": optimizer, "extra": {"best_acc": best_acc, "best_epoch": best_epoch}}

    T = 0
    t0 = time.perf_counter()
    for epoch in range(epochs):
        if T >= total:
            break
        batches = it.epoch(epoch)
        if prefetch_batches:
            batches = prefetch(batches, depth=2)
        loss_sum, correct, seen = 0.0, 0, 0
        lr = p_t = mu_t = 0.0
        errs_sum = None
        n_steps = 0
        for x, y in batches:
            if T >= total:
                break
            lr = lr_at(eta0, T, t_max)
            p_t = replacement_rate_at(schedule, T)
            mu_t = mu_at(schedule, T) if estimator.kind is EstimatorKind.PEGE else 0.0
            try:
                logits = forward_quantized(
                    model, x, T, Mode.TRAIN, estimator, schedule, replacement, cfg["replace.activations"]
                )
                loss = ops.cross_entropy(logits, y)
                model.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                _write_diagnostic(out_dir, T, epoch, exc, {"lr": lr, "p_t": p_t, "mu_t": mu_t})
                raise
            if not np.isfinite(loss.item()):
                exc = NonFiniteError(f"loss is {loss.item()}")
                _write_diagnostic(out_dir, T, epoch, exc, {"lr": lr, "p_t": p_t, "mu_t": mu_t})
                raise exc
            optimizer.step(lr)
            loss_sum += loss.item() * len(y)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
            seen += len(y)
            errs = np.asarray(model.discretization_errors(), dtype=np.float64)
            errs_sum = errs if errs_sum is None else errs_sum + errs
            n_steps += 1
            T += 1
        last_epoch = epoch == epochs - 1 or T >= total
        if (epoch + 1) % cfg["train.eval_period"] and not last_epoch:
            continue
        test_acc = evaluate(model, test_set, cfg["train.eval_batch"])
        secs = time.perf_counter() - t0
        timings.append((epoch, secs))
        rec = MetricsRecord(
            epoch=epoch,
            step=T,
            train_loss=loss_sum / max(seen, 1),
            train_acc=100.0 * correct / max(seen, 1),
            test_acc=test_acc,
            p_t=p_t,
            mu_t=mu_t,
            lr=lr,
            disc_err=list(errs_sum / n_steps) if n_steps and errs_sum is not None else [],
            secs=0.0 if deterministic else secs,
        )
        metrics.append(rec)
        log.info("epoch %d step %d loss %.4f train %.2f test %.2f", epoch, T, rec.train_loss, rec.train_acc, test_acc)
        if test_acc >= best_acc:
            best_acc, best_epoch = test_acc, epoch
            if out_dir:
                save_checkpoint(model, state(T), os.path.join(out_dir, "best.ckpt"))

    if out_dir:
        save_checkpoint(model, state(T), os.path.join(out_dir, "final.ckpt"))
        if metrics:
            emit_metrics(metrics, os.path.join(out_dir, "metrics.csv"))
        with open(os.path.join(out_dir, "timing.csv"), "w") as fh:
            fh.write("epoch,secs\n")
            for e, s in timings:
                fh.write(f"{e},{s:.6f}\n")
    return TrainResult(model, metrics, best_acc, best_epoch, T, optimizer, schedule)
