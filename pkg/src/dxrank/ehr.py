"""Core EHR data model: diagnosis vocabularies, patient records, dataset I/O,
patient-level splitting, and prediction-instance construction.

Diagnosis codes live at two granularities: fine-grained ICD codes and the
coarse CCS categories that group them. The ontology is a many-to-one
ICD -> CCS map; CCS is the prediction target space throughout.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class OntologyError(ValueError):
    """Raised for malformed or inconsistent ontology inputs."""


class DatasetError(ValueError):
    """Raised for malformed dataset files or codes that do not resolve."""


class SplitError(ValueError):
    """Raised when a requested patient split cannot be honored."""


@dataclass(frozen=True)
class Ontology:
    """Many-to-one ICD -> CCS map with display names for both levels."""

    icd_to_ccs: dict[str, str]
    icd_names: dict[str, str]
    ccs_names: dict[str, str]
    ccs_to_icd: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for icd, ccs in self.icd_to_ccs.items():
            if not icd:
                raise OntologyError("empty ICD id")
            if ccs not in self.ccs_names:
                raise OntologyError(f"ICD {icd!r} maps to unknown CCS {ccs!r}")
        if not self.ccs_to_icd:
            inverse: dict[str, list[str]] = {c: [] for c in self.ccs_names}
            for icd in sorted(self.icd_to_ccs):
                inverse[self.icd_to_ccs[icd]].append(icd)
            object.__setattr__(
                self, "ccs_to_icd", {c: tuple(v) for c, v in inverse.items()}
            )

    @property
    def ccs_codes(self) -> tuple[str, ...]:
        """All CCS ids in sorted order; the canonical vocabulary ordering."""
        return tuple(sorted(self.ccs_names))

    def icd_name(self, icd: str) -> str:
        return self.icd_names.get(icd, icd)

    def ccs_name(self, ccs: str) -> str:
        return self.ccs_names.get(ccs, ccs)

    def ccs_of(self, icd: str) -> str:
        try:
            return self.icd_to_ccs[icd]
        except KeyError:
            raise OntologyError(f"ICD code {icd!r} not in ontology") from None

    def image(self, icds: Iterable[str]) -> frozenset[str]:
        """CCS image of a set of ICD codes."""
        return frozenset(self.ccs_of(i) for i in icds)


@dataclass(frozen=True)
class Visit:
    """One encounter: a day offset plus the diagnosis codes recorded there.

    Code collections are normalized to sorted tuples so visits compare by
    set content and serialize deterministically.
    """

    day: int
    icd: tuple[str, ...]
    ccs: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "icd", tuple(sorted(set(self.icd))))
        object.__setattr__(self, "ccs", tuple(sorted(set(self.ccs))))
        if not self.icd:
            raise DatasetError("visit has no ICD codes")
        if self.day < 0:
            raise DatasetError(f"negative visit day {self.day}")

    @property
    def ccs_set(self) -> frozenset[str]:
        return frozenset(self.ccs)


@dataclass(frozen=True)
class PatientRecord:
    """Ordered visit sequence for one patient."""

    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))
        if not self.visits:
            raise DatasetError(f"patient {self.patient_id!r} has no visits")
        days = [v.day for v in self.visits]
        if days != sorted(days):
            object.__setattr__(
                self, "visits", tuple(sorted(self.visits, key=lambda v: v.day))
            )

    def all_ccs(self) -> frozenset[str]:
        return frozenset(c for v in self.visits for c in v.ccs)


@dataclass(frozen=True)
class Dataset:
    patients: tuple[PatientRecord, ...]
    ontology_ref: str = ""

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        seen: set[str] = set()
        for p in self.patients:
            if p.patient_id in seen:
                raise DatasetError(f"duplicate patient id {p.patient_id!r}")
            seen.add(p.patient_id)

    def __len__(self) -> int:
        return len(self.patients)


@dataclass(frozen=True)
class PredictionInstance:
    """One next-visit prediction problem: an input prefix and its targets.

    `target_novel` is the subset of the target visit's CCS codes absent from
    every input visit; `days_to_target` is the gap between the target visit
    and the last input visit, used for prompt phrasing.
    """

    patient_id: str
    input_visits: tuple[Visit, ...]
    target_overall: frozenset[str]
    target_novel: frozenset[str]
    history_ccs: frozenset[str]
    days_to_target: int = 0

    def __post_init__(self):
        if not self.input_visits:
            raise DatasetError("prediction instance with empty input")
        if self.target_novel != self.target_overall - self.history_ccs:
            raise DatasetError(
                f"inconsistent novel target for patient {self.patient_id!r}"
            )


# ---------------------------------------------------------------------------
# Ontology I/O (CSV: icd_id,icd_name,ccs_id,ccs_name)
# ---------------------------------------------------------------------------

ONTOLOGY_COLUMNS = ("icd_id", "icd_name", "ccs_id", "ccs_name")


def load_ontology(path: str | Path) -> Ontology:
    """Load an ICD->CCS ontology from CSV, enforcing the many-to-one map."""
    import csv

    icd_to_ccs: dict[str, str] = {}
    icd_names: dict[str, str] = {}
    ccs_names: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ONTOLOGY_COLUMNS if c not in header]
        if missing:
            raise OntologyError(f"ontology CSV missing columns: {missing}")
        for lineno, row in enumerate(reader, start=2):
            icd, ccs = row["icd_id"], row["ccs_id"]
            if not icd or not ccs:
                raise OntologyError(f"line {lineno}: empty code id")
            if icd in icd_to_ccs and icd_to_ccs[icd] != ccs:
                raise OntologyError(
                    f"line {lineno}: ICD {icd!r} mapped to both "
                    f"{icd_to_ccs[icd]!r} and {ccs!r}"
                )
            icd_to_ccs[icd] = ccs
            icd_names[icd] = row["icd_name"]
            if ccs in ccs_names and ccs_names[ccs] != row["ccs_name"]:
                raise OntologyError(f"line {lineno}: CCS {ccs!r} renamed")
            ccs_names[ccs] = row["ccs_name"]
    return Ontology(icd_to_ccs=icd_to_ccs, icd_names=icd_names, ccs_names=ccs_names)


def save_ontology(ontology: Ontology, path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ONTOLOGY_COLUMNS)
        for icd in sorted(ontology.icd_to_ccs):
            ccs = ontology.icd_to_ccs[icd]
            writer.writerow(
                [icd, ontology.icd_name(icd), ccs, ontology.ccs_name(ccs)]
            )


# ---------------------------------------------------------------------------
# Dataset I/O (JSONL: one patient per line)
# ---------------------------------------------------------------------------


def load_dataset(path: str | Path, ontology: Ontology) -> Dataset:
    """Load a JSONL dataset and validate every code against the ontology.

    Per-visit `ccs` entries are recomputed checks, not trusted: a stored set
    that disagrees with the ICD image is an error, and a missing `ccs` key is
    filled in from the ontology.
    """
    patients: list[PatientRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc})") from None
            try:
                pid = obj["patient_id"]
                raw_visits = obj["visits"]
            except (KeyError, TypeError):
                raise DatasetError(
                    f"line {lineno}: expected object with patient_id and visits"
                ) from None
            visits = []
            for v in raw_visits:
                icd = v.get("icd", [])
                for code in icd:
                    if code not in ontology.icd_to_ccs:
                        raise DatasetError(
                            f"line {lineno}: patient {pid!r} has ICD code "
                            f"{code!r} not in ontology"
                        )
                derived = ontology.image(icd)
                if "ccs" in v:
                    stated = frozenset(v["ccs"])
                    if stated != derived:
                        raise DatasetError(
                            f"line {lineno}: patient {pid!r} visit day "
                            f"{v.get('day')}: stored ccs does not match the "
                            f"ontology image of its icd codes"
                        )
                visits.append(Visit(day=int(v["day"]), icd=tuple(icd), ccs=tuple(derived)))
            patients.append(PatientRecord(patient_id=pid, visits=tuple(visits)))
    return Dataset(patients=tuple(patients))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write JSONL with sorted code lists; byte-deterministic for equal data."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in dataset.patients:
            obj = {
                "patient_id": p.patient_id,
                "visits": [
                    {"day": v.day, "icd": list(v.icd), "ccs": list(v.ccs)}
                    for v in p.visits
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Splitting and instance construction
# ---------------------------------------------------------------------------


def split_patients(
    dataset: Dataset,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Partition patients into train/val/test with largest-remainder sizing.

    Deterministic for a given seed; parts keep the original patient order.
    """
    if any(r < 0 for r in ratios):
        raise SplitError(f"negative ratio in {ratios}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise SplitError(f"ratios {ratios} do not sum to 1")
    n = len(dataset.patients)
    n_nonzero = sum(1 for r in ratios if r > 0)
    if n < n_nonzero:
        raise SplitError(
            f"cannot split {n} patients into {n_nonzero} non-empty parts"
        )

    exact = [r * n for r in ratios]
    sizes = [int(math.floor(x)) for x in exact]
    remainders = [x - s for x, s in zip(exact, sizes)]
    while sum(sizes) < n:
        # Largest remainder first; earlier part wins exact ties.
        idx = max(range(3), key=lambda i: (remainders[i], -i))
        sizes[idx] += 1
        remainders[idx] = -1.0

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    bounds = np.cumsum([0] + sizes)
    parts = []
    for i in range(3):
        chosen = sorted(order[bounds[i] : bounds[i + 1]])
        parts.append(
            Dataset(
                patients=tuple(dataset.patients[j] for j in chosen),
                ontology_ref=dataset.ontology_ref,
            )
        )
    return parts[0], parts[1], parts[2]


def build_instances(
    dataset: Dataset, min_visits: int = 2, all_prefixes: bool = False
) -> list[PredictionInstance]:
    """Turn each eligible patient into next-visit prediction instances.

    Default is one instance per patient (all but the last visit as input,
    the last as target). `all_prefixes=True` emits one instance for every
    visit transition instead. Patients with fewer than `min_visits` visits
    are skipped.
    """
    if min_visits < 2:
        raise DatasetError("min_visits must be at least 2")
    instances: list[PredictionInstance] = []
    for p in dataset.patients:
        if len(p.visits) < min_visits:
            continue
        cut_points = range(1, len(p.visits)) if all_prefixes else [len(p.visits) - 1]
        for t in cut_points:
            inputs = p.visits[:t]
            target = p.visits[t]
            history = frozenset(c for v in inputs for c in v.ccs)
            overall = target.ccs_set
            instances.append(
                PredictionInstance(
                    patient_id=p.patient_id,
                    input_visits=inputs,
                    target_overall=overall,
                    target_novel=overall - history,
                    history_ccs=history,
                    days_to_target=target.day - inputs[-1].day,
                )
            )
    return instances
