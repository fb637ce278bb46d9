"""Ensemble prediction, argmax labeling, and connected-component cleanup.

Ensembling averages post-softmax probabilities over the member models (EMA
weights by default); the labelmap is the per-voxel argmax with ties broken
toward the lowest channel index. The component filter keeps, per label and
then for the whole foreground, only the largest 26-connected component.
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from . import schema as sch
from .network import cascade_forward, load_checkpoint, model_from_checkpoint, softmax_labels
from .volume import LABELMAP, Volume, load_volume, save_volume

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=int)


@dataclass(frozen=True)
class EnsembleSpec:
    checkpoint_paths: tuple
    use_ema: bool = True

    def __post_init__(self):
        if not self.checkpoint_paths:
            raise ValueError("ensemble needs at least one checkpoint")


def load_ensemble(spec):
    models = []
    meta = None
    for path in spec.checkpoint_paths:
        payload = load_checkpoint(path)
        key = (str(payload["unet_config"]), str(sorted(payload["label_codes"].items())))
        if meta is None:
            meta = key
        elif key != meta:
            raise ValueError(f"checkpoint schema mismatch: {path}")
        models.append(model_from_checkpoint(payload, use_ema=spec.use_ema))
    return models


def ensemble_mean(probs):
    """Arithmetic mean of per-model probability arrays."""
    return sum(probs) / float(len(probs))


def _argmax_codes(prob, codes):
    """Per-voxel argmax mapped through channel->code lookup (ties resolve to
    the lowest channel index)."""
    idx = np.argmax(prob, axis=0)
    return np.asarray(codes, dtype=np.int16)[idx]


def predict_subject(models_or_spec, sample):
    """Ensemble prediction for one preprocessed SubjectSample.

    Returns (stage1 labelmap Volume, stage2 labelmap Volume, stage2 ensemble
    probability array of shape (C, D, H, W)).
    """
    models = (
        load_ensemble(models_or_spec)
        if isinstance(models_or_spec, EnsembleSpec)
        else models_or_spec
    )
    x = torch.as_tensor(sample.image_channels())
    probs1, probs2 = [], []
    with torch.no_grad():
        for model in models:
            y1, y2 = cascade_forward(model, x, sample.group, training=False)
            probs1.append(softmax_labels(y1).numpy())
            probs2.append(softmax_labels(y2).numpy())
    mean1 = ensemble_mean(probs1)
    mean2 = ensemble_mean(probs2)

    schema = models[0].schema
    geom = sample.sequences[sch.SEQUENCES[0]]
    lm1 = Volume(
        data=_argmax_codes(mean1, schema.stage_codes(1, sample.group)),
        spacing=geom.spacing,
        origin=geom.origin,
        kind=LABELMAP,
    )
    lm2 = Volume(
        data=_argmax_codes(mean2, schema.stage_codes(2, sample.group)),
        spacing=geom.spacing,
        origin=geom.origin,
        kind=LABELMAP,
    )
    return lm1, lm2, mean2


def largest_component_filter(lm, connectivity=CONNECTIVITY_26):
    """Two-pass largest-component filter on a labelmap volume.

    Pass 1 keeps, for each foreground label separately, only its largest
    connected component. Pass 2 treats the remaining foreground as one binary
    mask and keeps only its largest component. Empty labels pass through.
    """
    data = lm.data.copy()

    def keep_largest(mask):
        comps, n = ndimage.label(mask, structure=connectivity)
        if n <= 1:
            return mask
        sizes = np.bincount(comps.ravel())[1:]
        return comps == (int(np.argmax(sizes)) + 1)

    for label in np.unique(data):
        if label == 0:
            continue
        mask = data == label
        data[mask & ~keep_largest(mask)] = 0

    fg = data != 0
    if fg.any():
        data[fg & ~keep_largest(fg)] = 0
    return lm.with_data(data)


def export_prediction(lm, reference, path):
    """Resample a prediction back onto the reference geometry (nearest
    neighbor, background outside the predicted field) and write it with the
    reference header."""
    ref_shape = np.asarray(reference.shape)
    ref_spacing = np.asarray(reference.spacing)
    ref_origin = np.asarray(reference.origin)
    spacing = np.asarray(lm.spacing)
    origin = np.asarray(lm.origin)

    grids = np.meshgrid(
        *(
            (np.arange(n, dtype=np.float64) * rs + ro - o) / s
            for n, rs, ro, o, s in zip(ref_shape, ref_spacing, ref_origin, origin, spacing)
        ),
        indexing="ij",
    )
    out = ndimage.map_coordinates(
        lm.data, np.stack(grids), order=0, mode="constant", cval=0
    )
    vol = Volume(
        data=out.astype(lm.data.dtype),
        spacing=reference.spacing,
        origin=reference.origin,
        kind=LABELMAP,
    )
    save_volume(vol, path)
    return vol


def reference_geometry(entry):
    """Original-geometry volume of the subject's first available sequence,
    used as the export target."""
    seq = next(s for s in sch.SEQUENCES if s in entry.sequence_paths)
    return load_volume(entry.sequence_paths[seq])
