"""
NAS/RRC verdict fusion.

Each layer's trace-level prediction is weighted by its support score (the
prediction confidence). Agreeing layers keep their label; disagreeing layers
resolve to the label of the heavier prediction, NAS on an exact tie.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

from app.core_model import DatasetKind, Label, LabelKind, Layer, label_space
from app.errors import LabelSpaceMismatch, ValidationError
from app.fbs_detect import Prediction
from app.schemas import FusionRecord

logger = logging.getLogger(__name__)

WEIGHT_GRID_STEPS = 20


@dataclass(frozen=True)
class FusedVerdict:
    label: Label
    winner: Layer
    w_nas: float
    w_rrc: float
    nas: Prediction
    rrc: Prediction

    @property
    def confidence(self) -> float:
        return self.w_nas if self.winner == Layer.NAS else self.w_rrc

    def to_record(self) -> FusionRecord:
        return FusionRecord(winner=self.winner.value, w_nas=self.w_nas, w_rrc=self.w_rrc)


def support_score(prediction: Prediction) -> float:
    """Fusion weight of a layer prediction: its confidence, unchanged."""
    if not 0.0 <= prediction.confidence <= 1.0:
        raise ValidationError(f"confidence {prediction.confidence} is outside [0, 1]")
    return prediction.confidence


def _space_of(label: Label) -> Optional[LabelKind]:
    return None if label.kind == LabelKind.BENIGN else label.kind


def fuse(p_nas: Prediction, p_rrc: Prediction) -> FusedVerdict:
    """
    Combine the NAS and RRC predictions of one trace.

    Raises:
        LabelSpaceMismatch: one prediction is Fbs and the other an Msa class
        ValidationError: the predictions belong to different traces
    """
    spaces = {_space_of(p_nas.label), _space_of(p_rrc.label)} - {None}
    if len(spaces) > 1:
        raise LabelSpaceMismatch(f"Cannot fuse {p_nas.label} with {p_rrc.label}")
    if p_nas.trace_id and p_rrc.trace_id and p_nas.trace_id != p_rrc.trace_id:
        raise ValidationError(f"Cannot fuse verdicts of {p_nas.trace_id} and {p_rrc.trace_id}")

    w_nas, w_rrc = support_score(p_nas), support_score(p_rrc)
    if p_nas.label == p_rrc.label:
        winner = Layer.NAS if w_nas >= w_rrc else Layer.RRC
    elif w_rrc > w_nas:
        winner = Layer.RRC
    else:
        winner = Layer.NAS
    label = p_nas.label if winner == Layer.NAS else p_rrc.label
    logger.debug(f"fused {p_nas.label}@{w_nas:.3f} + {p_rrc.label}@{w_rrc:.3f} -> {label} ({winner.value})")
    return FusedVerdict(label, winner, w_nas, w_rrc, p_nas, p_rrc)


def _case_formula(l_nas: Label, w_nas: float, l_rrc: Label, w_rrc: float) -> Label:
    if l_nas == l_rrc:
        return l_nas
    if w_nas > w_rrc:
        return l_nas
    if w_rrc > w_nas:
        return l_rrc
    return l_nas


def fuse_exhaustive_check() -> Dict[str, int]:
    """
    Check fuse against the three-case rule over every label pair of both
    label spaces and every weight pair on a 0.05 grid.

    Returns:
        {"checked", "mismatches", "ties"}; mismatches must be 0
    """
    weights: List[float] = [i / WEIGHT_GRID_STEPS for i in range(WEIGHT_GRID_STEPS + 1)]
    checked = mismatches = ties = 0
    for dataset_kind in (DatasetKind.FBS, DatasetKind.MSA):
        labels = label_space(dataset_kind)
        for l_nas in labels:
            for l_rrc in labels:
                for w_nas in weights:
                    for w_rrc in weights:
                        verdict = fuse(Prediction(l_nas, w_nas, Layer.NAS), Prediction(l_rrc, w_rrc, Layer.RRC))
                        checked += 1
                        if l_nas != l_rrc and w_nas == w_rrc:
                            ties += 1
                        if verdict.label != _case_formula(l_nas, w_nas, l_rrc, w_rrc):
                            mismatches += 1
    if mismatches:
        logger.error(f"❌ Fusion check: {mismatches} mismatches out of {checked}")
    else:
        logger.info(f"✅ Fusion check: {checked} combinations, {ties} ties, 0 mismatches")
    return {"checked": checked, "mismatches": mismatches, "ties": ties}
