"""ClassMix masks and the inter-/intra-domain mixing operators.

The donor's pixels (source or labeled target) are pasted over an unlabeled
target recipient wherever the donor's label falls in a randomly chosen half of
its classes. Labels follow the same mask: donor ground truth on pasted pixels,
teacher pseudo-labels elsewhere.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import IGNORE, Sample, to_rgb8, write_pgm, write_ppm

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    ONE_XU_TWO_STREAMS = "one_xu_two_streams"
    TWO_XU_TWO_STREAMS = "two_xu_two_streams"
    ONE_XU_ONE_STREAM = "one_xu_one_stream"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"onexutwostreams": cls.ONE_XU_TWO_STREAMS,
                   "twoxutwostreams": cls.TWO_XU_TWO_STREAMS,
                   "onexuonestream": cls.ONE_XU_ONE_STREAM}
        try:
            return cls(key)
        except ValueError:
            if key.replace("_", "") in aliases:
                return aliases[key.replace("_", "")]
            raise ValueError(f"unknown mixing strategy {value!r}; "
                             f"choose from {[s.value for s in cls]}") from None


@dataclass
class MixedBatch:
    image: np.ndarray          # [3,H,W]
    label: np.ndarray          # [H,W]
    mask: np.ndarray           # [H,W] uint8, 1 = donor pixel
    quality: float = 1.0
    stream: str = "inter"      # inter | intra | joint
    recipient_id: int = -1
    donor_ids: tuple[int, ...] = ()


def select_classes(label: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """ceil(k/2) of the k classes present in ``label``, uniformly without replacement."""
    present = np.unique(label[label != IGNORE])
    k = present.size
    if k == 0:
        raise ValueError("cannot select classes from an empty label map")
    if k == 1:
        log.warning("donor label has a single class %d; the whole image will be pasted",
                    int(present[0]))
    chosen = rng.choice(present, size=math.ceil(k / 2), replace=False)
    return np.sort(chosen)


def build_mask(label: np.ndarray, classes) -> np.ndarray:
    classes = np.asarray(list(classes) if not isinstance(classes, np.ndarray) else classes)
    if classes.size == 0:
        return np.zeros(label.shape, dtype=np.uint8)
    return np.isin(label, classes).astype(np.uint8)


def mix(donor_img: np.ndarray, donor_lbl: np.ndarray, recipient_img: np.ndarray,
        recipient_lbl: np.ndarray, mask: np.ndarray) -> MixedBatch:
    """Paste the donor over the recipient where ``mask`` is 1 (image and label alike)."""
    if not (donor_img.shape == recipient_img.shape
            and donor_lbl.shape == recipient_lbl.shape == mask.shape == donor_img.shape[1:]):
        raise ValueError(
            f"mix shape mismatch: donor {donor_img.shape}/{donor_lbl.shape}, "
            f"recipient {recipient_img.shape}/{recipient_lbl.shape}, mask {mask.shape}")
    m = mask.astype(bool)
    image = np.where(m[None], donor_img, recipient_img)
    label = np.where(m, donor_lbl, recipient_lbl).astype(recipient_lbl.dtype)
    return MixedBatch(image=image, label=label, mask=mask.astype(np.uint8))


def compose_strategy(strategy, source: Sample, labeled_target: Sample,
                     unlabeled: list[Sample], pseudo: list[tuple[np.ndarray, float]],
                     rng: np.random.Generator, use_inter: bool = True,
                     use_intra: bool = True) -> list[MixedBatch]:
    """Build the mixed training images for one (source, labeled, unlabeled) triple.

    ``pseudo[k]`` is the teacher's (label, quality) for ``unlabeled[k]``. Both
    class selections are always drawn so the RNG stream does not depend on the
    loss switches.
    """
    strategy = Strategy.parse(strategy)
    m1 = build_mask(source.label, select_classes(source.label, rng))
    m2 = build_mask(labeled_target.label, select_classes(labeled_target.label, rng))
    if strategy is Strategy.TWO_XU_TWO_STREAMS and len(unlabeled) < 2:
        raise ValueError("two_xu_two_streams needs two unlabeled samples")
    if len(pseudo) != len(unlabeled):
        raise ValueError("need one pseudo-label per unlabeled sample")

    out: list[MixedBatch] = []
    if strategy is Strategy.ONE_XU_ONE_STREAM:
        if not (use_inter or use_intra):
            return out
        u, (yhat, q) = unlabeled[0], pseudo[0]
        m1 = m1 if use_inter else np.zeros_like(m1)
        m2 = m2 if use_intra else np.zeros_like(m2)
        # labeled-target pixels win where both masks fire
        first = mix(source.image, source.label, u.image, yhat, m1)
        joint = mix(labeled_target.image, labeled_target.label, first.image, first.label, m2)
        joint.mask = np.maximum(m1, m2)
        joint.quality, joint.stream, joint.recipient_id = q, "joint", u.id
        joint.donor_ids = (source.id, labeled_target.id)
        return [joint]

    inter_k, intra_k = (0, 1) if strategy is Strategy.TWO_XU_TWO_STREAMS else (0, 0)
    if use_inter:
        u, (yhat, q) = unlabeled[inter_k], pseudo[inter_k]
        b = mix(source.image, source.label, u.image, yhat, m1)
        b.quality, b.stream, b.recipient_id, b.donor_ids = q, "inter", u.id, (source.id,)
        out.append(b)
    if use_intra:
        u, (yhat, q) = unlabeled[intra_k], pseudo[intra_k]
        b = mix(labeled_target.image, labeled_target.label, u.image, yhat, m2)
        b.quality, b.stream, b.recipient_id, b.donor_ids = q, "intra", u.id, (labeled_target.id,)
        out.append(b)
    return out


def dump_mixed(batch: MixedBatch, directory, stem: str) -> None:
    """Write image/label/mask as PPM + PGM + PGM for visual audit."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / f"{stem}_{batch.stream}.ppm", to_rgb8(batch.image))
    write_pgm(d / f"{stem}_{batch.stream}_label.pgm", batch.label.astype(np.uint8))
    write_pgm(d / f"{stem}_{batch.stream}_mask.pgm", batch.mask.astype(np.uint8) * 255)
