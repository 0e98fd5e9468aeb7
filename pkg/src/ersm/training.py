"""AdamW training of the masked classifier under L_total = L_CE + L_reg.

The loop is sequential and fully deterministic given (dataset, config):
shuffles come from one seeded generator, per-sample gradients are averaged
in fixed index order, and the cosine schedule is a pure function of the
step counter. Frozen parameter groups enter the graph as constants, so they
receive no gradients and stay bitwise unchanged. The best-test-accuracy
parameters are retained alongside the final ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import energy_mask as em
from . import model as M
from . import tensor as T
from .autodiff import Tape
from ._fileio import atomic_write_text, fmt_float

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "EpochMetrics",
    "TrainResult",
    "AdamWState",
    "GridCell",
    "total_loss",
    "cosine_lr",
    "adamw_step",
    "decay_exempt",
    "train",
    "evaluate",
    "grid_search",
    "best_cell",
    "write_metrics_csv",
    "METRICS_HEADER",
]

HIST_BINS = 10


class TrainingDivergedError(RuntimeError):
    """The total loss (or a gradient) became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    peak_lr: float = 3e-3
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    lambda_unary: float = 1e-3
    lambda_pair: float = 1e-3
    seed: int = 0
    frozen_groups: tuple = ()
    eval_interval: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # peak_lr = 0 is allowed so a no-op run can still produce metrics
        if self.peak_lr < 0 or self.min_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.min_lr > self.peak_lr:
            raise ValueError("min_lr must not exceed peak_lr")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.lambda_unary < 0 or self.lambda_pair < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        bad = set(self.frozen_groups) - set(M.PARAM_GROUPS)
        if bad:
            raise ValueError(f"unknown frozen groups {sorted(bad)}; valid: {M.PARAM_GROUPS}")


@dataclass
class EpochMetrics:
    epoch: int
    lce: float
    lreg: float
    ltotal: float
    train_acc: float
    test_acc: float
    mean_mask: float
    hist: tuple  # fraction of tokens per tenth of [0, 1]


METRICS_HEADER = "epoch,lce,lreg,ltotal,train_acc,test_acc,mean_mask," + ",".join(
    f"hist_{i}" for i in range(HIST_BINS)
)


@dataclass
class TrainResult:
    params: M.ModelParams
    best_params: M.ModelParams
    best_epoch: int
    best_test_acc: float
    metrics: list


@dataclass
class AdamWState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    # beta2 = 0.995 keeps the second-moment memory (~200 steps) well below
    # the length of a desk-scale run; with 0.999 the variance estimate left
    # over from the early task-learning phase throttles the later
    # regularizer-driven descent of the mask
    beta2: float = 0.995
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict, names) -> "AdamWState":
        return cls(
            m={n: np.zeros_like(params[n]) for n in names},
            v={n: np.zeros_like(params[n]) for n in names},
        )


# ---------------------------------------------------------------------------
# pieces


def total_loss(logits, label: int, diagnostics) -> float:
    """L_total = cross-entropy + expected retained energy. ``diagnostics``
    may be None (baseline variant), which drops the regularizer."""
    lce = float(T.cross_entropy_logits(logits, label))
    if diagnostics is None:
        return lce
    return lce + em.reg_loss(diagnostics.m, diagnostics.e_total)


def cosine_lr(step: int, total_steps: int, peak: float, floor: float) -> float:
    """Cosine decay from ``peak`` at step 0 to ``floor`` at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * step / total_steps))


def decay_exempt(name: str) -> bool:
    """Biases (including the mask bias) are exempt from weight decay."""
    return name.endswith(".bias") or name == "mask.b"


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, weight_decay: float,
               frozen_groups=frozenset()) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Parameters without a gradient entry and parameters in frozen groups are
    left untouched; decay applies only to decay-eligible entries.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params:
        if name not in grads:
            continue
        if M.param_group(name) in frozen_groups:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        p = params[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if weight_decay and not decay_exempt(name):
            p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# evaluation helper


@dataclass
class _SplitStats:
    lce: float
    lreg: float
    ltotal: float
    acc: float
    mean_mask: float
    hist: tuple


def _mask_hist(counts: np.ndarray) -> tuple:
    total = counts.sum()
    if total == 0:
        return tuple(float("nan") for _ in range(HIST_BINS))
    return tuple(float(c) / float(total) for c in counts)


_EVAL_CHUNK = 256


def evaluate(config: M.ModelConfig, params: M.ModelParams, dataset) -> _SplitStats:
    """Forward-only pass over a dataset; losses use train-mode energies so
    the reported objective matches what the optimizer sees."""
    model = M.Model(config, params)
    lce_sum = lreg_sum = 0.0
    correct = 0
    mask_sum = 0.0
    mask_count = 0
    hist = np.zeros(HIST_BINS, dtype=np.int64)
    for start in range(0, len(dataset), _EVAL_CHUNK):
        chunk = [dataset[i] for i in range(start, min(start + _EVAL_CHUNK, len(dataset)))]
        xb = np.stack([s.image for s in chunk])
        labels = np.array([s.label for s in chunk], dtype=np.int64)
        logits, diag = model.predict_batch(xb, mode="train")
        lce_sum += float(T.cross_entropy_logits(logits, labels).sum())
        if diag is not None:
            lreg_sum += float((diag.m * diag.e_total).mean(axis=-1).sum())
            mask_sum += float(diag.m.sum())
            mask_count += diag.m.size
            hist += np.histogram(diag.m, bins=HIST_BINS, range=(0.0, 1.0))[0]
        correct += int((logits.argmax(axis=-1) == labels).sum())
    n = len(dataset)
    mean_mask = mask_sum / mask_count if mask_count else float("nan")
    return _SplitStats(
        lce=lce_sum / n,
        lreg=lreg_sum / n,
        ltotal=(lce_sum + lreg_sum) / n,
        acc=correct / n,
        mean_mask=mean_mask,
        hist=_mask_hist(hist),
    )


# ---------------------------------------------------------------------------
# the loop


def _chunks(order, size):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def train(model: M.Model, train_set, test_set, config: TrainConfig) -> TrainResult:
    """Optimize ``model``'s parameters; the input model is left untouched.

    Metrics row 0 reports the initial parameters (evaluated on both splits);
    rows 1..epochs carry running training statistics plus a test evaluation
    every ``eval_interval`` epochs (always on the last). Raises
    :class:`TrainingDivergedError` as soon as a loss or gradient goes
    non-finite.
    """
    if len(train_set) == 0:
        raise ValueError("training split is empty")
    cfg_m = model.config
    work = {k: np.array(v, dtype=np.float64) for k, v in model.params.to_dict().items()}
    # the config's lambdas drive this run and are recorded in the checkpoint
    lam_pair = config.lambda_pair if cfg_m.variant == "full" else 0.0
    work["mask.lambda_unary"][...] = config.lambda_unary
    work["mask.lambda_pair"][...] = lam_pair
    mask_hyper = em.MaskLayerParams(
        w=work["mask.w"],
        b=0.0,
        lambda_unary=config.lambda_unary,
        lambda_pair=lam_pair,
        d=int(round(float(work["mask.d"]))),
    )
    frozen = frozenset(config.frozen_groups) | model.params.frozen
    trainable = [
        n for n in work
        if not M.is_hyper_entry(n) and M.param_group(n) not in frozen
    ]
    state = AdamWState.init(work, trainable)
    n_train = len(train_set)
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    rng = np.random.default_rng(config.seed)

    def snapshot() -> M.ModelParams:
        return M.ModelParams.from_dict(
            {k: np.array(v) for k, v in work.items()}, frozen=model.params.frozen
        )

    def eval_row(epoch: int) -> EpochMetrics:
        tr = evaluate(cfg_m, snapshot(), train_set)
        te = evaluate(cfg_m, snapshot(), test_set)
        return EpochMetrics(epoch, tr.lce, tr.lreg, tr.ltotal, tr.acc, te.acc, tr.mean_mask, tr.hist)

    metrics = [eval_row(0)]
    best_params = snapshot()
    best_epoch = 0
    best_acc = metrics[0].test_acc

    def make_nodes(tape: Tape) -> dict:
        nodes = {}
        for name in work:
            if M.is_hyper_entry(name):
                continue
            if name in trainable:
                nodes[name] = tape.variable(work[name])
            else:
                nodes[name] = tape.constant(work[name])
        return nodes

    global_step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_train)
        lce_sum = lreg_sum = 0.0
        correct = 0
        mask_sum = 0.0
        mask_count = 0
        hist = np.zeros(HIST_BINS, dtype=np.int64)
        for batch in _chunks(order, config.batch_size):
            xb = np.stack([train_set[int(i)].image for i in batch])
            labels = np.array([train_set[int(i)].label for i in batch], dtype=np.int64)
            tape = Tape()
            nodes = make_nodes(tape)
            logits, mask_nodes = M.predict_nodes(tape, xb, nodes, cfg_m, mask_hyper, mode="train")
            ce_vec = tape.cross_entropy_logits(logits, label=labels)
            ce_mean = tape.mean(ce_vec)
            loss = tape.add(ce_mean, mask_nodes["reg_loss"]) if mask_nodes else ce_mean
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(
                    f"non-finite total loss at epoch {epoch}, step {global_step}"
                )
            tape.backward(loss)
            grads: dict = {}
            for name in trainable:
                g = nodes[name].grad
                if g is None:
                    continue
                if not np.isfinite(g).all():
                    raise TrainingDivergedError(
                        f"non-finite gradient for {name!r} at epoch {epoch}, step {global_step}"
                    )
                grads[name] = g
            lce_sum += float(ce_vec.value.sum())
            if mask_nodes:
                # the batch regularizer is the mean of per-sample regularizers
                lreg_sum += float(mask_nodes["reg_loss"].value) * len(batch)
                m_vals = mask_nodes["m"].value
                mask_sum += float(m_vals.sum())
                mask_count += m_vals.size
                hist += np.histogram(m_vals, bins=HIST_BINS, range=(0.0, 1.0))[0]
            correct += int((logits.value.argmax(axis=-1) == labels).sum())
            lr_t = cosine_lr(global_step, total_steps, config.peak_lr, config.min_lr)
            adamw_step(work, grads, state, lr_t, config.weight_decay, frozen)
            global_step += 1
        run_test = epoch % config.eval_interval == 0 or epoch == config.epochs
        test_acc = evaluate(cfg_m, snapshot(), test_set).acc if run_test else float("nan")
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                lce=lce_sum / n_train,
                lreg=lreg_sum / n_train,
                ltotal=(lce_sum + lreg_sum) / n_train,
                train_acc=correct / n_train,
                test_acc=test_acc,
                mean_mask=mask_sum / mask_count if mask_count else float("nan"),
                hist=_mask_hist(hist),
            )
        )
        if run_test and test_acc > best_acc:
            best_acc = test_acc
            best_epoch = epoch
            best_params = snapshot()
    return TrainResult(
        params=snapshot(),
        best_params=best_params,
        best_epoch=best_epoch,
        best_test_acc=best_acc,
        metrics=metrics,
    )


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridCell:
    lambda_unary: float
    lambda_pair: float
    accuracy: float
    mean_mask: float
    error: str | None = None


def grid_search(model_config: M.ModelConfig, train_set, test_set,
                lambda_unary_values, lambda_pair_values, config: TrainConfig) -> list:
    """One training run per (lambda_unary, lambda_pair) cell, row-major over
    the grid. Every cell starts from the same seeded initialization. Cell
    failures are recorded in the row, not raised."""
    if not len(lambda_unary_values) or not len(lambda_pair_values):
        raise ValueError("lambda grid must be non-empty on both axes")
    cells = []
    for lu in lambda_unary_values:
        for lp in lambda_pair_values:
            cell_cfg = replace(config, lambda_unary=float(lu), lambda_pair=float(lp))
            model = M.Model(model_config, M.init_params(model_config, seed=config.seed))
            try:
                res = train(model, train_set, test_set, cell_cfg)
                cells.append(
                    GridCell(float(lu), float(lp), res.best_test_acc, res.metrics[-1].mean_mask)
                )
            except (TrainingDivergedError, T.NonFiniteError) as err:
                cells.append(GridCell(float(lu), float(lp), float("nan"), float("nan"), str(err)))
    return cells


def best_cell(cells, acc_window: float = 1e-3) -> GridCell:
    """Highest accuracy wins; cells within ``acc_window`` of the top are
    tied and the sparsest (lowest mean mask) of them is preferred."""
    ok = [c for c in cells if c.error is None and np.isfinite(c.accuracy)]
    if not ok:
        raise ValueError("every grid cell failed")
    top = max(c.accuracy for c in ok)
    best = None
    for c in ok:
        if c.accuracy < top - acc_window:
            continue
        if best is None or (np.isfinite(c.mean_mask) and c.mean_mask < best.mean_mask):
            best = c
    return best


# ---------------------------------------------------------------------------
# metrics CSV


def write_metrics_csv(metrics, path) -> None:
    lines = [METRICS_HEADER]
    for row in metrics:
        cells = [
            str(row.epoch),
            fmt_float(row.lce),
            fmt_float(row.lreg),
            fmt_float(row.ltotal),
            fmt_float(row.train_acc),
            fmt_float(row.test_acc),
            fmt_float(row.mean_mask),
        ] + [fmt_float(h) for h in row.hist]
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")
