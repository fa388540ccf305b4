"""Mini-batch training, inference and evaluation of a :class:`DetectorNet`."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from simdet.detloss import NMS_IOU, Detection, assign_targets, decode_arrays, nms_arrays, total_loss
from simdet.diffcore import DetectorNet, NetConfig, backward, forward, sgd_step
from simdet.errors import ConfigurationError, InvalidInputError
from simdet.evaluation import APReport, mean_average_precision
from simdet.geometry import BBox
from simdet.rng import SplitMix, derive
from simdet.synthdata.mosaic import mosaic
from simdet.synthdata.scene import Scene

log = logging.getLogger(__name__)

Labels = list[list[tuple[int, BBox]]]


@dataclass
class StageResult:
    initial_loss: float
    final_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0


def mean_loss(net: DetectorNet, images: np.ndarray, labels: Labels, lambda_noobj: float = 0.5, batch_size: int = 32) -> float:
    """Dataset-average loss without updating anything."""
    S, B = net.config.grid_size, net.config.boxes_per_cell
    total = 0.0
    for lo in range(0, len(images), batch_size):
        batch = slice(lo, lo + batch_size)
        targets = [assign_targets(l, S, B) for l in labels[batch]]
        rep = total_loss(forward(net, images[batch]), targets, lambda_noobj)
        total += rep.total * len(targets)
    net._forward_pending = False
    return total / len(images)


def _mosaic_sample(images, labels, rng: SplitMix, seed: int) -> tuple[np.ndarray, list]:
    picks = [int(rng.integers(0, len(images))) for _ in range(4)]
    scenes = [Scene(images[i], labels[i]) for i in picks]
    out = mosaic(scenes, seed, output_size=images.shape[1:3])
    return out.image, out.annotations


def train_stage(
    net: DetectorNet,
    images: np.ndarray,
    labels: Labels,
    epochs: int,
    lr: float,
    momentum: float,
    batch_size: int,
    seed: int,
    lambda_noobj: float = 0.5,
    mosaic_prob: float = 0.0,
    warmup_steps: int = 0,
    grad_clip: float | None = None,
) -> StageResult:
    """Momentum SGD over shuffled mini-batches; optionally mosaic-augments samples.

    The learning rate ramps linearly over ``warmup_steps`` and then follows a
    cosine decay to 5% of ``lr``. All randomness derives from ``seed``.
    """
    if len(images) != len(labels):
        raise InvalidInputError(f"{len(images)} images but {len(labels)} label lists")
    if len(images) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if epochs < 0 or batch_size < 1:
        raise ConfigurationError(f"bad schedule: epochs={epochs}, batch_size={batch_size}")
    if not 0.0 <= mosaic_prob <= 1.0:
        raise ConfigurationError(f"mosaic_prob must lie in [0, 1], got {mosaic_prob}")
    S, B = net.config.grid_size, net.config.boxes_per_cell
    targets = [assign_targets(l, S, B) for l in labels]
    probe = min(len(images), 64)
    result = StageResult(initial_loss=mean_loss(net, images[:probe], labels[:probe], lambda_noobj), final_loss=math.nan)
    net.velocity.clear()
    n = len(images)
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = max(1, epochs * steps_per_epoch)
    rng = SplitMix(derive(seed, 0x7A))
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            x = images[idx]
            tg = [targets[i] for i in idx]
            if mosaic_prob > 0:
                x = x.copy()
                for j in range(len(idx)):
                    if rng.uniform() < mosaic_prob:
                        x[j], anns = _mosaic_sample(images, labels, rng, derive(seed, epoch, lo + j))
                        tg[j] = assign_targets(anns, S, B)
            if step < warmup_steps:
                rate = lr * (step + 1) / warmup_steps
            else:
                frac = (step - warmup_steps) / max(1, total_steps - warmup_steps)
                rate = lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac)))
            rep = total_loss(forward(net, x), tg, lambda_noobj)
            backward(net, rep.tensor)
            if grad_clip is not None:
                clip_gradients(net, grad_clip)
            sgd_step(net, rate, momentum)
            running += rep.total * len(idx)
            step += 1
        result.epoch_losses.append(running / n)
        log.debug("epoch %d loss %.4f", epoch, running / n)
    result.steps = step
    result.final_loss = result.epoch_losses[-1] if result.epoch_losses else result.initial_loss
    return result


def clip_gradients(net: DetectorNet, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in net.parameters() if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for p in net.parameters():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def detect(
    net: DetectorNet,
    images: np.ndarray,
    conf_thresh: float,
    nms_iou: float = NMS_IOU,
    batch_size: int = 64,
) -> list[list[Detection]]:
    """Decoded, NMS-filtered detections for every image."""
    B = net.config.boxes_per_cell
    out: list[list[Detection]] = []
    for lo in range(0, len(images), batch_size):
        preds = forward(net, images[lo : lo + batch_size]).data
        for pred in preds:
            cls, conf, boxes = decode_arrays(pred, B, conf_thresh)
            keep = nms_arrays(cls, conf, boxes, nms_iou)
            out.append([Detection(int(cls[k]), BBox(*boxes[k]), float(conf[k])) for k in keep])
    net._forward_pending = False
    return out


def evaluate_detector(
    net: DetectorNet,
    images: np.ndarray,
    labels: Labels,
    iou_thresh: float = 0.5,
    conf_thresh: float = 0.005,
    nms_iou: float = NMS_IOU,
) -> APReport:
    dets = detect(net, images, conf_thresh, nms_iou)
    return mean_average_precision(dets, labels, iou_thresh, net.config.num_classes, conf_thresh)


def config_from_state(state: dict[str, list[np.ndarray]], input_size: int, boxes_per_cell: int = 2) -> NetConfig:
    """Recover the architecture of a saved weight file."""
    try:
        bb, neck, head = state["backbone"], state["neck"], state["head"]
        channels = (bb[0].shape[3], bb[2].shape[3], bb[4].shape[3])
        neck_ch = neck[0].shape[3]
        out = head[0].shape[3]
    except (KeyError, IndexError) as exc:
        raise ConfigurationError(f"weight file does not describe a detector: {exc}") from exc
    if out % boxes_per_cell or out // boxes_per_cell < 6:
        raise ConfigurationError(f"head emits {out} channels, incompatible with {boxes_per_cell} boxes per cell")
    return NetConfig(input_size, boxes_per_cell, out // boxes_per_cell - 5, channels, neck_ch)


def net_from_state(state, input_size: int, boxes_per_cell: int = 2) -> DetectorNet:
    net = DetectorNet(config_from_state(state, input_size, boxes_per_cell))
    for name, arrays in state.items():
        params = net.segments[name].params()
        if len(params) != len(arrays) or any(p.data.shape != a.shape for p, a in zip(params, arrays)):
            raise ConfigurationError(f"segment {name!r} does not match the inferred architecture")
        for p, a in zip(params, arrays):
            p.data = a.astype(np.float32, copy=True)
    return net


def stack_scenes(scenes: Sequence[Scene]) -> tuple[np.ndarray, Labels]:
    return np.stack([s.image for s in scenes]), [list(s.annotations) for s in scenes]
