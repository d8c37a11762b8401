import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from modules.data import BatchPair, DatasetContainer, sample_pairwise_batches
from modules.data_types import ModelConfig, TrainConfig, TrainLogRow
from modules.errors import ContractError, NumericalError, TrainingAborted
from modules.losses import classification_loss, contrastive_loss, similarity_triple, total_loss
from modules.model import ModelParams, classify, encode, init_params, predict
from modules.tensor_core import ComputationRecord, Tensor, backward
from modules.utils import derive_seed, get_logger, write_csv

TRAIN_LOG_HEADER = ("iter", "l_total", "l_con", "l_cls", "temperature", "batch_acc")

INIT_STREAM_KEY = 0
SAMPLER_STREAM_KEY = 1


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: ModelParams,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> AdamState:
    """
    One bias-corrected Adam descent step, in place on `params`.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    state.step += 1
    bc1 = 1.0 - cfg.beta1**state.step
    bc2 = 1.0 - cfg.beta2**state.step

    for name, tensor in params.items():
        g = grads[name]
        if g is None or g.shape != tensor.shape:
            raise ContractError(
                f"gradient for {name} has shape {None if g is None else g.shape}, "
                f"parameter has {tensor.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)

        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)

        m_hat = m / bc1
        v_hat = v / bc2
        update = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        tensor.data = (tensor.data - update).astype(tensor.dtype)
    return state


@dataclass
class TrainLog:
    rows: List[TrainLogRow] = field(default_factory=list)
    # (iteration, held-out accuracy) at every logged step when a validation set is given
    validation: List[Tuple[int, float]] = field(default_factory=list)

    def append(self, row: TrainLogRow):
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ContractError("train log iterations must be strictly increasing")
        self.rows.append(row)

    def last(self) -> Optional[TrainLogRow]:
        return self.rows[-1] if self.rows else None

    def write_csv(self, path: str):
        write_csv(
            path,
            TRAIN_LOG_HEADER,
            (
                (r.iteration, r.l_total, r.l_con, r.l_cls, r.temperature, r.batch_acc)
                for r in self.rows
            ),
        )


def _batch_accuracy(p1: Tensor, p2: Tensor, y_gt: List[int]) -> float:
    y = np.asarray(y_gt)
    hits = np.sum(np.argmax(p1.data, axis=1) == y) + np.sum(np.argmax(p2.data, axis=1) == y)
    return float(hits) / (2 * len(y))


def held_out_accuracy(ds: DatasetContainer, params: ModelParams) -> float:
    _, logits = predict(ds.images, params)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def training_step(
    params: ModelParams,
    batch_pair: BatchPair,
    cfg: TrainConfig,
) -> Tuple[Tensor, Tensor, Tensor, float, float]:
    """
    Forward and backward for one pair of class-complete batches.

    Returns (l_total, l_con, l_cls, temperature, batch accuracy); gradients are
    left on `params`.
    """
    loss_cfg = cfg.loss
    record = ComputationRecord()
    params.zero_grad()

    e1 = encode(batch_pair.b1, params, record)
    e2 = encode(batch_pair.b2, params, record)
    p1 = classify(e1, params, record)
    p2 = classify(e2, params, record)
    l_cls = classification_loss(p1, p2, batch_pair.y_gt, loss_cfg.focal_gamma, record)

    if cfg.scl_enabled:
        triple = similarity_triple(e1, e2, params.log_temp, loss_cfg.temp_max, record)
        l_con = contrastive_loss(triple, batch_pair.y_gt, loss_cfg.focal_gamma, record)
        temperature = triple.temperature
    else:
        # the ablation baseline: lambda1 := 0, everything else unchanged
        l_con = Tensor(0.0, dtype=l_cls.dtype)
        loss_cfg = loss_cfg.model_copy(update={"lambda1": 0.0})
        temperature = params.temperature(loss_cfg.temp_max)

    l_total = total_loss(l_con, l_cls, loss_cfg, record)
    backward(l_total, record)
    return l_total, l_con, l_cls, temperature, _batch_accuracy(p1, p2, batch_pair.y_gt)


def initial_params(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ModelParams:
    """The parameters a run with this seed starts from."""
    return init_params(
        model_cfg,
        derive_seed(train_cfg.seed, INIT_STREAM_KEY),
        temp_init_log=train_cfg.loss.temp_init_log,
    )


def _check_dataset_fits(ds: DatasetContainer, model_cfg: ModelConfig, role: str):
    if ds.n_classes != model_cfg.n_classes:
        raise ContractError(
            f"{role} dataset has {ds.n_classes} classes, model expects {model_cfg.n_classes}"
        )
    if (ds.height, ds.width) != (model_cfg.input_height, model_cfg.input_width):
        raise ContractError(
            f"{role} dataset images are {ds.height}x{ds.width}, model expects "
            f"{model_cfg.input_height}x{model_cfg.input_width}"
        )


def train_loop(
    train_ds: DatasetContainer,
    val_ds: Optional[DatasetContainer],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    logger: Optional[logging.Logger] = None,
) -> Tuple[ModelParams, TrainLog]:
    """Seeded SCL training: sample, encode, score, backpropagate and step Adam once per iteration."""
    logger = logger or get_logger()
    _check_dataset_fits(train_ds, model_cfg, "training")
    if val_ds is not None:
        _check_dataset_fits(val_ds, model_cfg, "validation")

    params = initial_params(model_cfg, train_cfg)
    rng = np.random.default_rng(derive_seed(train_cfg.seed, SAMPLER_STREAM_KEY))
    state = AdamState()
    log = TrainLog()

    arm = "SCL" if train_cfg.scl_enabled else "baseline"
    logger.info(
        f"🚀 Training {arm} for {train_cfg.iterations} iterations "
        f"({params.parameter_count()} parameters, seed {train_cfg.seed})"
    )

    for iteration in range(train_cfg.iterations):
        batch_pair = sample_pairwise_batches(train_ds, rng)
        try:
            l_total, l_con, l_cls, temperature, batch_acc = training_step(
                params, batch_pair, train_cfg
            )
        except NumericalError as e:
            raise TrainingAborted(iteration, log.last(), str(e))
        if not math.isfinite(l_total.item()):
            raise TrainingAborted(iteration, log.last(), "non-finite loss")

        adam_step(params, params.grads(), state, train_cfg)
        if not all(np.all(np.isfinite(t.data)) for _, t in params.items()):
            raise TrainingAborted(iteration, log.last(), "parameters became non-finite")

        last = iteration == train_cfg.iterations - 1
        if iteration % train_cfg.log_every == 0 or last:
            row = TrainLogRow(
                iteration=iteration,
                l_total=l_total.item(),
                l_con=l_con.item(),
                l_cls=l_cls.item(),
                temperature=temperature,
                batch_acc=batch_acc,
            )
            log.append(row)
            message = (
                f"📊 iter {iteration}: L_total={row.l_total:.4f} L_con={row.l_con:.4f} "
                f"L_cls={row.l_cls:.4f} t={row.temperature:.3f} batch_acc={row.batch_acc:.3f}"
            )
            if val_ds is not None:
                val_acc = held_out_accuracy(val_ds, params)
                log.validation.append((iteration, val_acc))
                message += f" val_acc={val_acc:.4f}"
            logger.info(message)

    return params, log
