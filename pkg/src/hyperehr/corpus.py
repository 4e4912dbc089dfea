"""EHR data model: vocabularies, visits, patients, preprocessing, synthetic
corpora, and the on-disk interchange format.

File formats
------------
``corpus.jsonl``
    One JSON object per line, one patient per line::

        {"patient_id": "p0", "visits": [{"diag": [0, 3], "proc": [1], "med": [2]}]}

``vocab.json``
    Manifest carrying the three vocabularies and the patient split::

        {"format": "hyperehr-corpus-v1",
         "vocabularies": {"diag": [...], "proc": [...], "med": [...]},
         "split": {"p0": "train", ...}}

``ddi.edges``
    Tab-separated medication code pairs, one interaction per line.

``hierarchy.<domain>.edges``
    Tab-separated ``parent<TAB>child`` pairs rooted at the literal node
    ``ROOT``. Vocabulary codes absent from the file attach directly to ROOT.

All integer indices are vocabulary positions; code strings are opaque.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, CorpusExhaustedError, DataError, HierarchyError
from .utils import canonical_json, sha256_hex

logger = logging.getLogger(__name__)

CORPUS_FORMAT = "hyperehr-corpus-v1"
ROOT = "ROOT"
SPLITS = ("train", "val", "test")


class Domain(str, Enum):
    DIAG = "diag"
    PROC = "proc"
    MED = "med"


DOMAINS = (Domain.DIAG, Domain.PROC, Domain.MED)


@dataclass(frozen=True)
class CodeVocabulary:
    """Ordered code list for one domain; position in ``codes`` is the index."""

    domain: Domain
    codes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.codes)) != len(self.codes):
            raise DataError(f"duplicate codes in {self.domain.value} vocabulary")

    @cached_property
    def index(self) -> dict[str, int]:
        return {code: i for i, code in enumerate(self.codes)}

    def __len__(self) -> int:
        return len(self.codes)


@dataclass(frozen=True)
class Visit:
    diag: frozenset[int]
    proc: frozenset[int]
    med: frozenset[int]

    def domain_set(self, domain: Domain) -> frozenset[int]:
        return getattr(self, domain.value)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]


@dataclass(frozen=True)
class EHRCorpus:
    vocabularies: Mapping[Domain, CodeVocabulary]
    patients: tuple[PatientRecord, ...]
    split: Mapping[str, str]

    def vocab(self, domain: Domain) -> CodeVocabulary:
        return self.vocabularies[domain]

    def patients_in(self, split: str) -> tuple[PatientRecord, ...]:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return tuple(p for p in self.patients if self.split[p.patient_id] == split)

    @property
    def num_visits(self) -> int:
        return sum(len(p.visits) for p in self.patients)

    def validate(self) -> None:
        """Check index bounds and split coverage; raises DataError naming the
        offending patient."""
        sizes = {d: len(self.vocab(d)) for d in DOMAINS}
        ids = set()
        for patient in self.patients:
            if patient.patient_id in ids:
                raise DataError(f"duplicate patient_id {patient.patient_id!r}")
            ids.add(patient.patient_id)
            if patient.patient_id not in self.split:
                raise DataError(f"patient {patient.patient_id!r} missing from split")
            if self.split[patient.patient_id] not in SPLITS:
                raise DataError(
                    f"patient {patient.patient_id!r} has unknown split "
                    f"{self.split[patient.patient_id]!r}"
                )
            for visit in patient.visits:
                for domain in DOMAINS:
                    indices = visit.domain_set(domain)
                    if indices and (min(indices) < 0 or max(indices) >= sizes[domain]):
                        raise DataError(
                            f"patient {patient.patient_id!r} has out-of-range "
                            f"{domain.value} index"
                        )
        extra = set(self.split) - ids
        if extra:
            raise DataError(f"split references unknown patients: {sorted(extra)[:3]}")

    def to_jsonable(self) -> dict:
        return {
            "format": CORPUS_FORMAT,
            "vocabularies": {d.value: list(self.vocab(d).codes) for d in DOMAINS},
            "split": dict(sorted(self.split.items())),
            "patients": [
                {
                    "patient_id": p.patient_id,
                    "visits": [
                        {d.value: sorted(v.domain_set(d)) for d in DOMAINS}
                        for v in p.visits
                    ],
                }
                for p in self.patients
            ],
        }

    def digest(self) -> str:
        return sha256_hex(canonical_json(self.to_jsonable()))


def encode_multihot(indices: Iterable[int], size: int) -> np.ndarray:
    """Set membership as a 0/1 vector over one vocabulary."""
    bits = np.zeros(size, dtype=np.uint8)
    idx = list(indices)
    if idx:
        if min(idx) < 0 or max(idx) >= size:
            raise DataError("multi-hot index out of range")
        bits[idx] = 1
    return bits


def decode_multihot(bits: np.ndarray) -> frozenset[int]:
    return frozenset(int(i) for i in np.flatnonzero(bits))


# ---------------------------------------------------------------------------
# Preprocessing


def preprocess(raw: EHRCorpus, min_code_freq: int = 5, min_visits: int = 2) -> EHRCorpus:
    """Filter rare codes, then short trajectories, then rebuild vocabularies.

    Order of operations (single pass, no fixpoint iteration): codes occurring
    fewer than ``min_code_freq`` times across all visits are dropped; visits
    left without diagnoses or medications are dropped; patients left with
    fewer than ``min_visits`` visits are dropped; vocabularies are rebuilt
    once from the surviving visits and re-indexed densely.

    Because the rebuild is single-pass, a code whose count falls below
    ``min_code_freq`` only after patient removal is retained; applying
    preprocess twice can therefore differ from applying it once on such
    corpora.
    """
    if min_visits < 2:
        raise ConfigError("min_visits must be at least 2")
    raw.validate()

    counts = {d: Counter() for d in DOMAINS}
    for patient in raw.patients:
        for visit in patient.visits:
            for domain in DOMAINS:
                counts[domain].update(visit.domain_set(domain))
    frequent = {
        d: {i for i, c in counts[d].items() if c >= min_code_freq} for d in DOMAINS
    }

    survivors: list[PatientRecord] = []
    for patient in raw.patients:
        kept_visits = []
        for visit in patient.visits:
            filtered = Visit(
                diag=visit.diag & frequent[Domain.DIAG],
                proc=visit.proc & frequent[Domain.PROC],
                med=visit.med & frequent[Domain.MED],
            )
            if filtered.diag and filtered.med:
                kept_visits.append(filtered)
        if len(kept_visits) >= min_visits:
            survivors.append(PatientRecord(patient.patient_id, tuple(kept_visits)))
    if not survivors:
        raise CorpusExhaustedError(
            f"corpus exhausted: no patient retains >= {min_visits} visits "
            f"after filtering codes with frequency < {min_code_freq}"
        )

    used = {d: set() for d in DOMAINS}
    for patient in survivors:
        for visit in patient.visits:
            for domain in DOMAINS:
                used[domain].update(visit.domain_set(domain))

    remap = {}
    vocabularies = {}
    for domain in DOMAINS:
        old = raw.vocab(domain)
        kept = [i for i in range(len(old)) if i in used[domain]]
        remap[domain] = {i: new for new, i in enumerate(kept)}
        vocabularies[domain] = CodeVocabulary(
            domain, tuple(old.codes[i] for i in kept)
        )

    patients = tuple(
        PatientRecord(
            p.patient_id,
            tuple(
                Visit(
                    diag=frozenset(remap[Domain.DIAG][i] for i in v.diag),
                    proc=frozenset(remap[Domain.PROC][i] for i in v.proc),
                    med=frozenset(remap[Domain.MED][i] for i in v.med),
                )
                for v in p.visits
            ),
        )
        for p in survivors
    )
    split = {p.patient_id: raw.split[p.patient_id] for p in patients}
    processed = EHRCorpus(vocabularies, patients, split)
    processed.validate()
    return processed


# Row labels follow the reference dataset table so reports are comparable.
STATISTIC_ROWS = (
    "# of patients",
    "# of visits",
    "avg. # of visits",
    "# of unique diag. codes",
    "# of unique proc. codes",
    "# of unique med. codes",
    "avg. # of diag. per visit",
    "avg. # of proc. per visit",
    "avg. # of med. per visit",
)


def corpus_statistics(corpus: EHRCorpus) -> dict[str, float]:
    n_patients = len(corpus.patients)
    visits = [v for p in corpus.patients for v in p.visits]
    n_visits = len(visits)

    def avg(domain):
        return sum(len(v.domain_set(domain)) for v in visits) / max(n_visits, 1)

    return {
        "# of patients": n_patients,
        "# of visits": n_visits,
        "avg. # of visits": n_visits / max(n_patients, 1),
        "# of unique diag. codes": len(corpus.vocab(Domain.DIAG)),
        "# of unique proc. codes": len(corpus.vocab(Domain.PROC)),
        "# of unique med. codes": len(corpus.vocab(Domain.MED)),
        "avg. # of diag. per visit": avg(Domain.DIAG),
        "avg. # of proc. per visit": avg(Domain.PROC),
        "avg. # of med. per visit": avg(Domain.MED),
    }


# ---------------------------------------------------------------------------
# Synthetic corpus generation


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the latent-condition-cluster generator.

    Each patient is assigned a condition cluster; visits draw diagnoses and
    procedures from the cluster's code pool (with a small ``code_leak``
    toward the full vocabulary) and medications from the cluster's canonical
    set, each member swapped for a random outsider with probability
    ``med_noise``. The cluster structure is what makes retrieval of similar
    visits informative rather than noise.
    """

    n_patients: int = 60
    n_diag: int = 48
    n_proc: int = 24
    n_med: int = 32
    n_clusters: int = 4
    avg_diag: float = 6.0
    avg_proc: float = 2.5
    avg_med: float = 8.0
    mean_visits: float = 3.0
    min_visits: int = 2
    max_visits: int = 8
    med_noise: float = 0.05
    code_leak: float = 0.08
    ddi_density: float = 0.08
    split_fractions: tuple[float, float, float] = (2 / 3, 1 / 6, 1 / 6)
    seed: int = 0

    def validate(self) -> None:
        sizes = {"diag": self.n_diag, "med": self.n_med}
        if self.n_proc > 0:
            sizes["proc"] = self.n_proc
        for name, size in sizes.items():
            if self.n_clusters > size:
                raise ConfigError(
                    f"cluster count {self.n_clusters} exceeds {name} vocabulary "
                    f"size {size}"
                )
        if round(self.avg_med) > self.n_med // self.n_clusters:
            raise ConfigError(
                "avg_med exceeds per-cluster medication pool size "
                f"({self.n_med} codes / {self.n_clusters} clusters)"
            )
        if not self.min_visits <= self.mean_visits <= self.max_visits:
            raise ConfigError("mean_visits must lie within [min_visits, max_visits]")
        if not 0.0 <= self.med_noise <= 1.0:
            raise ConfigError("med_noise must be in [0, 1]")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must sum to 1")


def _code_name(domain: Domain, i: int) -> str:
    return f"{domain.value[0]}{i:04d}"


def _cluster_pools(config: SynthConfig) -> dict[Domain, list[np.ndarray]]:
    """Contiguous partition of each vocabulary into per-cluster code pools."""
    pools = {}
    for domain, size in (
        (Domain.DIAG, config.n_diag),
        (Domain.PROC, config.n_proc),
        (Domain.MED, config.n_med),
    ):
        if size == 0:
            pools[domain] = [np.array([], dtype=int)] * config.n_clusters
        else:
            pools[domain] = np.array_split(np.arange(size), config.n_clusters)
    return pools


def generate_synthetic(config: SynthConfig) -> EHRCorpus:
    """Deterministic synthetic corpus with planted condition clusters."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    pools = _cluster_pools(config)
    med_size = int(round(config.avg_med))
    canonical_meds = [
        np.sort(rng.choice(pools[Domain.MED][c], size=med_size, replace=False))
        for c in range(config.n_clusters)
    ]

    def draw_codes(pool: np.ndarray, vocab_size: int, mean: float, at_least: int):
        if vocab_size == 0:
            return frozenset()
        want = int(np.clip(rng.poisson(mean), at_least, len(pool)))
        if want == 0:
            return frozenset()
        picked = rng.choice(pool, size=want, replace=False)
        leak = rng.random(want) < config.code_leak
        picked[leak] = rng.integers(0, vocab_size, size=int(leak.sum()))
        return frozenset(int(i) for i in picked)

    patients = []
    for p in range(config.n_patients):
        cluster = int(rng.integers(config.n_clusters))
        n_visits = int(
            np.clip(
                config.min_visits + rng.poisson(config.mean_visits - config.min_visits),
                config.min_visits,
                config.max_visits,
            )
        )
        visits = []
        for _ in range(n_visits):
            diag = draw_codes(pools[Domain.DIAG][cluster], config.n_diag, config.avg_diag, 1)
            proc = draw_codes(pools[Domain.PROC][cluster], config.n_proc, config.avg_proc, 0)
            meds = canonical_meds[cluster].copy()
            swap = rng.random(med_size) < config.med_noise
            for j in np.flatnonzero(swap):
                outsider = int(rng.integers(config.n_med))
                while outsider in meds:
                    outsider = int(rng.integers(config.n_med))
                meds[j] = outsider
            visits.append(Visit(diag=diag, proc=proc, med=frozenset(int(i) for i in meds)))
        patients.append(PatientRecord(f"p{p:04d}", tuple(visits)))

    order = rng.permutation(config.n_patients)
    n_train = int(round(config.split_fractions[0] * config.n_patients))
    n_val = int(round(config.split_fractions[1] * config.n_patients))
    split = {}
    for rank, idx in enumerate(order):
        name = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        split[patients[idx].patient_id] = name

    vocabularies = {
        d: CodeVocabulary(d, tuple(_code_name(d, i) for i in range(size)))
        for d, size in (
            (Domain.DIAG, config.n_diag),
            (Domain.PROC, config.n_proc),
            (Domain.MED, config.n_med),
        )
    }
    corpus = EHRCorpus(vocabularies, tuple(patients), split)
    corpus.validate()
    return corpus


def generate_synthetic_knowledge(
    config: SynthConfig,
) -> tuple[dict[Domain, list[tuple[str, str]]], list[tuple[str, str]]]:
    """Cluster-derived code hierarchies and a random DDI edge list.

    Companion plumbing for :func:`generate_synthetic`: hierarchy edges group
    each cluster's code pool under an internal node, so tree path distance
    mirrors cluster membership; DDI edges are sampled uniformly over
    medication pairs. Deterministic given ``config.seed``.
    """
    rng = np.random.default_rng([config.seed, 1])
    pools = _cluster_pools(config)
    hierarchies: dict[Domain, list[tuple[str, str]]] = {}
    for domain in DOMAINS:
        edges = []
        for c, pool in enumerate(pools[domain]):
            if len(pool) == 0:
                continue
            group = f"{domain.value}-grp{c}"
            edges.append((ROOT, group))
            edges.extend((group, _code_name(domain, int(i))) for i in pool)
        hierarchies[domain] = edges

    ddi_edges = []
    for i in range(config.n_med):
        for j in range(i + 1, config.n_med):
            if rng.random() < config.ddi_density:
                ddi_edges.append((_code_name(Domain.MED, i), _code_name(Domain.MED, j)))
    return hierarchies, ddi_edges


# ---------------------------------------------------------------------------
# Interchange format


def save_corpus(corpus: EHRCorpus, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = corpus.to_jsonable()
    manifest = {
        "format": blob["format"],
        "vocabularies": blob["vocabularies"],
        "split": blob["split"],
    }
    (directory / "vocab.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    with open(directory / "corpus.jsonl", "w") as fh:
        for record in blob["patients"]:
            fh.write(canonical_json(record) + "\n")


def load_corpus(directory: str | Path) -> EHRCorpus:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "vocab.json").read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"vocab.json is not valid JSON: {exc}") from exc
    if manifest.get("format") != CORPUS_FORMAT:
        raise DataError(
            f"unsupported corpus format {manifest.get('format')!r}; "
            f"expected {CORPUS_FORMAT!r}"
        )
    vocabularies = {
        d: CodeVocabulary(d, tuple(manifest["vocabularies"][d.value])) for d in DOMAINS
    }
    patients = []
    with open(directory / "corpus.jsonl") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"corpus.jsonl line {lineno}: invalid JSON") from exc
            try:
                visits = tuple(
                    Visit(
                        diag=frozenset(v["diag"]),
                        proc=frozenset(v["proc"]),
                        med=frozenset(v["med"]),
                    )
                    for v in record["visits"]
                )
                patients.append(PatientRecord(record["patient_id"], visits))
            except (KeyError, TypeError) as exc:
                raise DataError(
                    f"corpus.jsonl line {lineno} "
                    f"(patient {record.get('patient_id', '?')!r}): missing field {exc}"
                ) from exc
    corpus = EHRCorpus(vocabularies, tuple(patients), dict(manifest["split"]))
    corpus.validate()
    return corpus


# ---------------------------------------------------------------------------
# DDI graph


@dataclass(frozen=True)
class DDIMatrix:
    """Symmetric 0/1 interaction matrix over the medication vocabulary."""

    matrix: np.ndarray
    skipped_unknown: int = 0

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DataError("DDI matrix must be square")
        if not np.array_equal(m, m.T):
            raise DataError("DDI matrix must be symmetric")
        if np.any(np.diag(m) != 0):
            raise DataError("DDI matrix must have a zero diagonal")
        if not np.isin(m, (0, 1)).all():
            raise DataError("DDI matrix entries must be 0/1")

    @classmethod
    def empty(cls, size: int) -> "DDIMatrix":
        return cls(np.zeros((size, size), dtype=np.int8))


def load_ddi(path: str | Path, med_vocab: CodeVocabulary) -> DDIMatrix:
    """Read a tab-separated medication-pair edge list.

    Pairs referencing unknown codes are skipped and counted; self-edges are
    ignored so the zero-diagonal invariant holds.
    """
    matrix = np.zeros((len(med_vocab), len(med_vocab)), dtype=np.int8)
    skipped = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}: line {lineno} is not a tab-separated pair")
        a, b = parts
        if a not in med_vocab.index or b not in med_vocab.index:
            skipped += 1
            continue
        i, j = med_vocab.index[a], med_vocab.index[b]
        if i == j:
            continue
        matrix[i, j] = matrix[j, i] = 1
    if skipped:
        logger.warning("load_ddi: skipped %d edges with unknown codes", skipped)
    return DDIMatrix(matrix, skipped_unknown=skipped)


def save_ddi_edges(edges: Sequence[tuple[str, str]], path: str | Path) -> None:
    Path(path).write_text("".join(f"{a}\t{b}\n" for a, b in edges))


# ---------------------------------------------------------------------------
# Code hierarchy


@dataclass(frozen=True)
class CodeHierarchy:
    """Rooted tree over codes; ``parent`` never maps ROOT, whose depth is 0."""

    domain: Domain
    parent: Mapping[str, str]
    depth: Mapping[str, int]

    def path_to_root(self, code: str) -> tuple[str, ...]:
        """Nodes from ``code`` up to and including ROOT."""
        path = [code]
        while path[-1] != ROOT:
            path.append(self.parent[path[-1]])
        return tuple(path)


def build_hierarchy(
    edges: Iterable[tuple[str, str]], vocab: CodeVocabulary
) -> CodeHierarchy:
    parent: dict[str, str] = {}
    for p, c in edges:
        if c == ROOT:
            raise HierarchyError("ROOT cannot be a child")
        if c in parent and parent[c] != p:
            raise HierarchyError(f"node {c!r} has two parents ({parent[c]!r}, {p!r})")
        parent[c] = p

    # Internal nodes mentioned only as parents hang off ROOT, as do
    # vocabulary codes missing from the edge list.
    for p in list(parent.values()):
        if p != ROOT and p not in parent:
            parent[p] = ROOT
    for code in vocab.codes:
        parent.setdefault(code, ROOT)

    depth: dict[str, int] = {ROOT: 0}

    def resolve(node: str, trail: tuple[str, ...]) -> int:
        if node in depth:
            return depth[node]
        if node in trail:
            cycle = trail[trail.index(node):] + (node,)
            raise HierarchyError(f"hierarchy cycle: {' -> '.join(cycle)}")
        depth[node] = resolve(parent[node], trail + (node,)) + 1
        return depth[node]

    for node in parent:
        resolve(node, ())
    return CodeHierarchy(vocab.domain, parent, depth)


def load_hierarchy(path: str | Path, vocab: CodeVocabulary) -> CodeHierarchy:
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}: line {lineno} is not a tab-separated pair")
        edges.append((parts[0], parts[1]))
    return build_hierarchy(edges, vocab)


def save_hierarchy_edges(edges: Sequence[tuple[str, str]], path: str | Path) -> None:
    Path(path).write_text("".join(f"{p}\t{c}\n" for p, c in edges))
