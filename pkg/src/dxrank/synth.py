"""Synthetic EHR generator with planted comorbidity rules.

Produces a desk-scale dataset whose statistical structure a sequence model
can actually learn: chronic codes persist across visits, and planted rules
make a trigger code in one visit raise the probability that an onset code
appears in the next visit. Vocabulary ids are generated as ``CCS-<k>`` /
``ICD-<k>.<j>`` so prompts stay readable without real code tables.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ehr import Dataset, Ontology, PatientRecord, Visit

# Probability that a patient's first visit is seeded with one rule trigger,
# so triggers are prevalent enough for rules to manifest at desk scale.
TRIGGER_SEED_PROB = 0.6

# Day gap between consecutive visits is drawn uniformly from this range.
DAY_GAP_RANGE = (3, 45)


class SyntheticConfigError(ValueError):
    """Raised for invalid synthetic-generation configs."""


@dataclass(frozen=True)
class ComorbidityRule:
    """If `trigger` is present in a visit, `onset` joins the next visit
    with probability `q` (independently per visit transition)."""

    trigger: str
    onset: str
    q: float


@dataclass(frozen=True)
class SyntheticConfig:
    n_patients: int = 500
    n_ccs: int = 60
    icd_per_ccs: int = 3
    chronic_rate: float = 0.7
    rules: tuple[ComorbidityRule, ...] = ()
    visits_range: tuple[int, int] = (2, 5)
    codes_per_visit_range: tuple[int, int] = (2, 4)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))

    def validate(self) -> None:
        if self.n_patients < 0:
            raise SyntheticConfigError("n_patients must be non-negative")
        if self.n_ccs < 1 or self.icd_per_ccs < 1:
            raise SyntheticConfigError("n_ccs and icd_per_ccs must be positive")
        if not 0.0 <= self.chronic_rate <= 1.0:
            raise SyntheticConfigError("chronic_rate must be in [0, 1]")
        for lo, hi, name in (
            (*self.visits_range, "visits_range"),
            (*self.codes_per_visit_range, "codes_per_visit_range"),
        ):
            if lo < 1 or hi < lo:
                raise SyntheticConfigError(f"{name} ({lo}, {hi}) is empty or invalid")
        if self.codes_per_visit_range[1] > self.n_ccs:
            raise SyntheticConfigError(
                "codes_per_visit_range exceeds the CCS vocabulary size"
            )
        vocab = set(ccs_vocabulary(self.n_ccs))
        for rule in self.rules:
            if not 0.0 <= rule.q <= 1.0:
                raise SyntheticConfigError(f"rule probability {rule.q} not in [0, 1]")
            if rule.trigger == rule.onset:
                raise SyntheticConfigError(
                    f"rule trigger and onset coincide ({rule.trigger})"
                )
            for code in (rule.trigger, rule.onset):
                if code not in vocab:
                    raise SyntheticConfigError(
                        f"rule references unknown CCS code {code!r} "
                        f"(vocabulary has {self.n_ccs} codes)"
                    )


def ccs_vocabulary(n_ccs: int) -> list[str]:
    """Generated CCS ids, zero-padded so lexicographic order is numeric."""
    width = max(3, len(str(n_ccs)))
    return [f"CCS-{k:0{width}d}" for k in range(1, n_ccs + 1)]


def _build_ontology(cfg: SyntheticConfig) -> Ontology:
    icd_to_ccs: dict[str, str] = {}
    icd_names: dict[str, str] = {}
    ccs_names: dict[str, str] = {}
    for ccs in ccs_vocabulary(cfg.n_ccs):
        ccs_names[ccs] = ccs
        k = ccs.split("-", 1)[1]
        for j in range(1, cfg.icd_per_ccs + 1):
            icd = f"ICD-{k}.{j}"
            icd_to_ccs[icd] = ccs
            icd_names[icd] = icd
    return Ontology(icd_to_ccs=icd_to_ccs, icd_names=icd_names, ccs_names=ccs_names)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Dataset, Ontology]:
    """Generate (Dataset, Ontology) deterministically from `cfg.seed`.

    Visit construction per patient: a per-patient visit size is drawn once;
    the first visit samples codes uniformly (optionally seeded with a rule
    trigger), and each later visit keeps chronic survivors, adds fired rule
    onsets, and tops up with fresh uniform codes to the visit size.
    """
    cfg.validate()
    ontology = _build_ontology(cfg)
    vocab = ccs_vocabulary(cfg.n_ccs)
    rng = np.random.default_rng(cfg.seed)

    id_width = max(5, len(str(cfg.n_patients)))
    patients: list[PatientRecord] = []
    for i in range(1, cfg.n_patients + 1):
        pid = f"P{i:0{id_width}d}"
        n_visits = int(rng.integers(cfg.visits_range[0], cfg.visits_range[1] + 1))
        size = int(
            rng.integers(
                cfg.codes_per_visit_range[0], cfg.codes_per_visit_range[1] + 1
            )
        )

        first = set()
        if cfg.rules and rng.random() < TRIGGER_SEED_PROB:
            rule = cfg.rules[int(rng.integers(len(cfg.rules)))]
            first.add(rule.trigger)
        first |= _fresh_codes(rng, vocab, first, size - len(first))

        ccs_visits = [first]
        for _ in range(n_visits - 1):
            prev = ccs_visits[-1]
            nxt = {c for c in sorted(prev) if rng.random() < cfg.chronic_rate}
            for rule in cfg.rules:
                if rule.trigger in prev and rng.random() < rule.q:
                    nxt.add(rule.onset)
            nxt |= _fresh_codes(rng, vocab, nxt, size - len(nxt))
            ccs_visits.append(nxt)

        day = 0
        visits = []
        for codes in ccs_visits:
            icds = [_pick_icd(rng, ontology, c) for c in sorted(codes)]
            visits.append(Visit(day=day, icd=tuple(icds), ccs=tuple(codes)))
            day += int(rng.integers(DAY_GAP_RANGE[0], DAY_GAP_RANGE[1] + 1))
        patients.append(PatientRecord(patient_id=pid, visits=tuple(visits)))

    return Dataset(patients=tuple(patients), ontology_ref="synthetic"), ontology


def _fresh_codes(
    rng: np.random.Generator, vocab: list[str], taken: set[str], need: int
) -> set[str]:
    if need <= 0:
        return set()
    pool = sorted(set(vocab) - taken)
    picked = rng.choice(len(pool), size=min(need, len(pool)), replace=False)
    return {pool[j] for j in picked}


def _pick_icd(rng: np.random.Generator, ontology: Ontology, ccs: str) -> str:
    children = ontology.ccs_to_icd[ccs]
    return children[int(rng.integers(len(children)))]
