"""Training loop, prediction and evaluation."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .adapter import LQAdapterModel, decay_group_count
from .checkpoint import save_checkpoint
from .dataset import load_image, split_dataset, write_atomic
from .errors import DataError, LQAdapterError, NumericalError
from .head import box_loss, to_bbox
from .metrics import center_rule_pr, cls_metrics, iou
from .models import BBox, EpochLog, MetricsReport, ModelConfig, Sample, TrainResult
from .optim import OptState, adamw_step
from .tensor import Tape, Tensor


logger = logging.getLogger(__name__)

HISTORY_FILE = "history.json"
SINGLE_BOX_NOTE = (
    "single-box head: every sample receives exactly one prediction, "
    "so no false negative can arise from a missing prediction"
)

ProgressCallback = Callable[[int, int, str], None]


def load_images(samples: Sequence[Sample]) -> dict[str, Tensor]:
    return {sample.image: load_image(Path(sample.image)) for sample in samples}


def predict(model: LQAdapterModel, image: Tensor) -> BBox:
    return to_bbox(model.predict(image))


def score_predictions(preds: Sequence[Optional[BBox]], samples: Sequence[Sample]) -> MetricsReport:
    """Metrics for explicit predictions aligned with ``samples``.

    A sample is classified lesion-present when its predicted center falls
    inside the ground-truth box.
    """
    if not samples:
        raise DataError("Cannot score an empty dataset")
    gts = [sample.box for sample in samples]
    ious = [0.0 if pred is None else iou(pred, gt) for pred, gt in zip(preds, gts)]
    pr = center_rule_pr(preds, gts)
    pred_labels = [int(pred is not None and gt.contains(pred.cx, pred.cy)) for pred, gt in zip(preds, gts)]
    cls = cls_metrics(pred_labels, [sample.label for sample in samples])
    notes = [SINGLE_BOX_NOTE] if all(pred is not None for pred in preds) else []
    return MetricsReport(
        miou=float(np.mean(ious)),
        precision=pr.values[0],
        recall=pr.values[1],
        accuracy=cls.values[0],
        specificity=cls.values[1],
        sensitivity=cls.values[2],
        per_sample_iou=ious,
        predictions=[None if pred is None else pred.as_list() for pred in preds],
        flags=pr.flags + cls.flags,
        notes=notes,
    )


def evaluate(
    model: LQAdapterModel,
    samples: Sequence[Sample],
    images: Optional[dict[str, Tensor]] = None,
) -> MetricsReport:
    """Predict every sample and score the predictions; deterministic."""
    if not samples:
        raise DataError("Cannot evaluate an empty dataset")
    images = images if images is not None else load_images(samples)
    preds = [predict(model, images[sample.image]) for sample in samples]
    return score_predictions(preds, samples)


def sample_gradients(model: LQAdapterModel, image: Tensor, box: BBox, weight: float) -> tuple[float, dict[str, np.ndarray]]:
    """Box loss of one sample and its weighted gradients, by parameter name."""
    with Tape() as tape:
        loss = box_loss(model.predict(image), box)
        grads = tape.backward(T.scale(loss, weight))
    return loss.item(), model.params.named_gradients(grads)


def train(
    config: ModelConfig,
    samples: Sequence[Sample],
    out_dir: Path,
    model: Optional[LQAdapterModel] = None,
    progress_callback: Optional[ProgressCallback] = None,
) -> TrainResult:
    """Train the adapter with AdamW; keep the best-validation-mIoU checkpoint.

    Epoch 0 in the history is the untrained model. On a non-finite loss or
    gradient the run stops and the last saved checkpoint stands.
    """
    if not samples:
        raise DataError("Cannot train on an empty dataset")
    out_dir = Path(out_dir)
    schedule = config.training()
    train_set, val_set = split_dataset(list(samples), schedule.val_fraction)
    images = load_images(samples)

    model = model or LQAdapterModel.create(config)
    state = OptState.for_store(
        model.params,
        lr=schedule.lr,
        weight_decay=schedule.weight_decay,
        layer_decay=schedule.layer_decay,
        num_groups=decay_group_count(config),
    )
    frozen_before = model.params.frozen_checksum()
    trainable, frozen = model.params.count()
    logger.info(
        "Training %d trainable parameters (%d frozen) on %d samples, validating on %d",
        trainable, frozen, len(train_set), len(val_set),
    )

    initial = evaluate(model, val_set, images)
    history = [EpochLog(epoch=0, val_miou=initial.miou, learning_rates=state.group_lrs())]
    best_epoch, best_miou = 0, initial.miou
    checkpoint = save_checkpoint(model, out_dir)
    logger.info("Epoch 0: val mIoU %.4f", initial.miou)

    rng = np.random.default_rng(schedule.seed)
    total_steps = schedule.epochs * -(-len(train_set) // schedule.batch_size)
    step = 0
    try:
        for epoch in range(1, schedule.epochs + 1):
            order = rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), schedule.batch_size):
                batch = [train_set[i] for i in order[start : start + schedule.batch_size]]
                summed: dict[str, np.ndarray] = {}
                for sample in batch:
                    loss, grads = sample_gradients(model, images[sample.image], sample.box, 1.0 / len(batch))
                    losses.append(loss)
                    for name, grad in grads.items():
                        summed[name] = summed[name] + grad if name in summed else grad
                model = model.with_params(adamw_step(model.params, summed, state))
                step += 1
                if progress_callback:
                    progress_callback(step, total_steps, f"epoch {epoch}: loss {np.mean(losses):.4f}")

            report = evaluate(model, val_set, images)
            history.append(
                EpochLog(
                    epoch=epoch,
                    train_loss=float(np.mean(losses)),
                    val_miou=report.miou,
                    learning_rates=state.group_lrs(),
                )
            )
            logger.info("Epoch %d: train loss %.4f, val mIoU %.4f", epoch, history[-1].train_loss, report.miou)
            if report.miou > best_miou:
                best_epoch, best_miou = epoch, report.miou
                checkpoint = save_checkpoint(model, out_dir)
    except NumericalError as exc:
        _write_history(out_dir, history)
        logger.error("Training diverged; last good checkpoint is %s", checkpoint)
        raise NumericalError(f"{exc} (last good checkpoint: {checkpoint})") from exc

    frozen_after = model.params.frozen_checksum()
    if frozen_after != frozen_before:
        raise LQAdapterError("frozen parameters changed during training")
    _write_history(out_dir, history)
    return TrainResult(
        checkpoint=str(checkpoint),
        best_epoch=best_epoch,
        best_miou=best_miou,
        history=history,
        frozen_checksum=frozen_after,
    )


def _write_history(out_dir: Path, history: list[EpochLog]) -> None:
    payload = [entry.model_dump(mode="json") for entry in history]
    write_atomic(Path(out_dir) / HISTORY_FILE, (json.dumps(payload, indent=2) + "\n").encode("utf-8"))
