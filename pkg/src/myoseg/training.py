"""End-to-end optimization of the cascade.

Per iteration one subject of each group is sampled, and the scalar objective
is the sum over groups of the stage-1 and stage-2 generalized Dice losses
(each weighted by its lambda). Stage-2 terms backpropagate into both trunks;
stage-1 terms only into the first. A temporal (exponential moving average)
copy of the weights is maintained and stored as the inference weights.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import schema as sch
from .grouping import SubjectStore, sample_training_triplet, stage1_groundtruth
from .network import (
    CascadeModel,
    build_cascade,
    cascade_forward,
    checkpoint_meta,
    load_checkpoint,
    save_checkpoint,
    softmax_labels,
)

log = logging.getLogger("myoseg.training")

GDL_EPS = 1e-7


def generalized_dice_loss(gt_onehot, prob, channel_mask=None, eps=GDL_EPS):
    """Generalized Dice loss with per-channel masking.

    L = 1 - 2 (sum_l w_l sum_i g_li p_li + eps) / (sum_l w_l sum_i (g_li + p_li) + eps)
    with w_l = 1 / (sum_i g_li + eps)^2, summing only channels where
    channel_mask is true. Masked channels are excluded from numerator and
    denominator alike.
    """
    if gt_onehot.shape != prob.shape:
        raise ValueError(
            f"shape mismatch: gt {tuple(gt_onehot.shape)} vs prob {tuple(prob.shape)}"
        )
    n_ch = gt_onehot.shape[0]
    if channel_mask is None:
        channel_mask = [True] * n_ch
    idx = [i for i, keep in enumerate(channel_mask) if keep]
    if not idx:
        raise ValueError("channel mask selects no channels")
    g = gt_onehot[idx].reshape(len(idx), -1)
    p = prob[idx].reshape(len(idx), -1)
    w = 1.0 / (g.sum(dim=1) + eps) ** 2
    intersection = (g * p).sum(dim=1)
    total = (g + p).sum(dim=1)
    return 1.0 - 2.0 * ((w * intersection).sum() + eps) / ((w * total).sum() + eps)


def one_hot_labels(labels, codes, dtype=torch.float32):
    """One-hot encode an integer labelmap over the given per-channel codes.

    Codes outside the list indicate data inconsistent with the group's label
    availability and raise.
    """
    arr = np.asarray(labels)
    known = np.isin(arr, codes)
    if not known.all():
        bad = sorted(int(v) for v in np.unique(arr[~known]))
        raise ValueError(f"labelmap contains codes outside the schema: {bad}")
    channels = [(arr == c) for c in codes]
    return torch.as_tensor(np.stack(channels)).to(dtype)


def sample_targets(sample, schema, dtype=torch.float32):
    """(stage-1, stage-2) one-hot targets for a preprocessed SubjectSample."""
    s1 = stage1_groundtruth(sample, schema)
    codes1 = schema.stage_codes(1, sample.group)
    codes2 = schema.stage_codes(2, sample.group)
    gt1 = one_hot_labels(s1.data, codes1, dtype)
    gt2 = one_hot_labels(sample.labels.data, codes2, dtype)
    return gt1, gt2


def ema_update(ema, current, decay):
    """ema' = decay * ema + (1 - decay) * current, elementwise over two
    matching parameter structures (dicts of tensors)."""
    if not 0 <= decay < 1:
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    if set(ema.keys()) != set(current.keys()):
        raise ValueError("EMA/model parameter structure mismatch")
    with torch.no_grad():
        for key, value in ema.items():
            cur = current[key]
            if value.shape != cur.shape:
                raise ValueError(f"EMA shape mismatch for '{key}'")
            value.mul_(decay).add_(cur, alpha=1.0 - decay)
    return ema


@dataclass
class TrainState:
    model: CascadeModel
    ema_state: dict
    optimizer: torch.optim.Adam
    dropout_gen: torch.Generator
    data_rng: np.random.Generator
    iteration: int = 0
    loss_history: list = field(default_factory=list)


def make_train_state(cfg, schema, seed, learning_rate):
    seeds = np.random.SeedSequence(int(seed)).generate_state(3)
    model = build_cascade(cfg, schema, seed=int(seeds[0]))
    ema_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    optimizer = torch.optim.Adam(
        model.parameters(), lr=learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    gen = torch.Generator()
    gen.manual_seed(int(seeds[1]))
    rng = np.random.default_rng(int(seeds[2]))
    return TrainState(
        model=model,
        ema_state=ema_state,
        optimizer=optimizer,
        dropout_gen=gen,
        data_rng=rng,
    )


def cascade_objective(model, triplet, schema, lambda1=1.0, lambda2=1.0,
                      training=True, generator=None, dtype=torch.float32):
    """Scalar training objective: sum over the three groups of the weighted
    stage-1 and stage-2 generalized Dice losses."""
    loss = 0.0
    for sample in triplet:
        gt1, gt2 = sample_targets(sample, schema, dtype)
        x = torch.as_tensor(sample.image_channels()).to(dtype)
        y1, y2 = cascade_forward(model, x, sample.group, training, generator)
        loss = loss + lambda1 * generalized_dice_loss(gt1, softmax_labels(y1))
        loss = loss + lambda2 * generalized_dice_loss(gt2, softmax_labels(y2))
    return loss


def training_iteration(state, triplet, lambda1=1.0, lambda2=1.0, ema_decay=0.999):
    """One optimization step on a (G1, G2, G3) triplet; updates the EMA copy
    and the iteration counter in place."""
    model = state.model
    model_dtype = next(model.parameters()).dtype
    loss = cascade_objective(
        model,
        triplet,
        model.schema,
        lambda1,
        lambda2,
        training=True,
        generator=state.dropout_gen,
        dtype=model_dtype,
    )
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss.item()} at iteration {state.iteration}"
        )
    state.optimizer.zero_grad(set_to_none=False)
    loss.backward()
    state.optimizer.step()
    ema_update(state.ema_state, model.state_dict(), ema_decay)
    state.iteration += 1
    state.loss_history.append(float(loss.detach()))
    return state


# ---- checkpoint round trip -------------------------------------------------


def state_to_checkpoint(state, config_dict=None):
    payload = checkpoint_meta(state.model)
    payload.update(
        {
            "iteration": state.iteration,
            "model_state": {k: v.detach().clone() for k, v in state.model.state_dict().items()},
            "ema_state": {k: v.detach().clone() for k, v in state.ema_state.items()},
            "optimizer_state": state.optimizer.state_dict(),
            "dropout_gen_state": state.dropout_gen.get_state(),
            "data_rng_state": state.data_rng.bit_generator.state,
            "loss_history": list(state.loss_history),
            "run_config": config_dict,
        }
    )
    return payload


def state_from_checkpoint(payload, learning_rate):
    from .network import UNetConfig  # local to avoid cycle at import time

    cfg = UNetConfig(**payload["unet_config"])
    schema = sch.LabelSchema(codes=dict(payload["label_codes"]))
    model = CascadeModel(cfg, schema)
    model.load_state_dict(payload["model_state"])
    optimizer = torch.optim.Adam(
        model.parameters(), lr=learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    optimizer.load_state_dict(payload["optimizer_state"])
    gen = torch.Generator()
    gen.set_state(payload["dropout_gen_state"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["data_rng_state"]
    return TrainState(
        model=model,
        ema_state={k: v.clone() for k, v in payload["ema_state"].items()},
        optimizer=optimizer,
        dropout_gen=gen,
        data_rng=rng,
        iteration=int(payload["iteration"]),
        loss_history=list(payload["loss_history"]),
    )


def run_training(manifest, config, resume_from=None):
    """Train for config.training.iterations steps, writing periodic and final
    checkpoints (model weights plus the EMA weights used for inference).

    Returns the list of checkpoint paths written; the last entry is the final
    checkpoint. With resume_from, continues a previous run bit-exactly.
    """
    tr = config.training
    out_dir = Path(config.output.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = state_from_checkpoint(load_checkpoint(resume_from), tr.learning_rate)
    else:
        seed = tr.seed + 1000 * tr.fold
        state = make_train_state(
            config.unet_config(), config.label_schema(), seed, tr.learning_rate
        )

    settings = config.preprocess_settings(augment=True)
    store = SubjectStore(settings, cache_size=tr.cache_size)
    paths = []
    config_dict = config.to_dict()

    def write(tag):
        name = f"fold{tr.fold}_{tag}.pt"
        path = save_checkpoint(out_dir / name, state_to_checkpoint(state, config_dict))
        paths.append(path)
        return path

    t0 = time.time()
    while state.iteration < tr.iterations:
        triplet = sample_training_triplet(manifest, state.data_rng, settings, store)
        training_iteration(state, triplet, tr.lambda1, tr.lambda2, tr.ema_decay)
        if tr.log_interval and state.iteration % tr.log_interval == 0:
            recent = state.loss_history[-tr.log_interval:]
            log.info(
                "iter %d/%d loss %.4f (%.2f s/iter)",
                state.iteration,
                tr.iterations,
                sum(recent) / len(recent),
                (time.time() - t0) / state.iteration if state.iteration else 0.0,
            )
        if (
            tr.checkpoint_interval
            and state.iteration % tr.checkpoint_interval == 0
            and state.iteration < tr.iterations
        ):
            write(f"iter{state.iteration:06d}")

    final = write("final")
    log.info("training complete: %s", final)
    return paths
