"""Chagas target reconciliation for patients with conflicting ECG labels."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field


class LabelConflictError(ValueError):
    pass


@dataclass
class ResolvedLabelSet:
    labels: dict = field(default_factory=dict)
    n_conflicted_patients: int = 0
    n_records_softened: int = 0

    def __getitem__(self, record_id):
        return self.labels[record_id]

    def __len__(self):
        return len(self.labels)


def reconcile(labels) -> ResolvedLabelSet:
    """Soft-label every self-reported ECG of a conflicted patient with the positive fraction.

    A patient is conflicted when their ECGs carry both 0 and 1. The fraction
    counts all of the patient's ECGs; serology-confirmed records keep their label.
    """
    labels = list(labels)
    if not labels:
        raise ValueError("no labels to reconcile")
    seen = {}
    by_patient = defaultdict(list)
    for lab in labels:
        if lab.label not in (0.0, 1.0):
            raise ValueError(f"record {lab.record_id}: expected a 0/1 label, got {lab.label}")
        prev = seen.get(lab.record_id)
        if prev is not None:
            if prev.label != lab.label:
                raise LabelConflictError(f"record {lab.record_id} has contradictory labels")
            continue
        seen[lab.record_id] = lab
        by_patient[lab.patient_id].append(lab)

    out = ResolvedLabelSet()
    for records in by_patient.values():
        values = {r.label for r in records}
        if len(values) < 2:
            for r in records:
                out.labels[r.record_id] = r.label
            continue
        out.n_conflicted_patients += 1
        soft = sum(r.label for r in records) / len(records)
        for r in records:
            if r.source == "serology_confirmed":
                out.labels[r.record_id] = r.label
            else:
                out.labels[r.record_id] = soft
                out.n_records_softened += 1
    return out
