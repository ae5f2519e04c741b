"""Cohort and annotation ingestion.

Parses beta-value and metadata CSVs, imputes missing beta values with a
k-nearest-neighbour scheme, assembles the fixed per-site feature template,
and generates synthetic cohorts with a planted aging signal for desk-scale
benchmarks.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np

#: Column order of the node feature matrix. Methylation occupies column 0 and
#: is the only per-sample slot; the remaining 10 columns are static per site.
FEATURE_NAMES = [
    "methylation",
    "in_island",
    "island_len_norm",
    "next_base_A",
    "next_base_C",
    "next_base_G",
    "next_base_T",
    "island_start_norm",
    "island_end_norm",
    "tss_dist_norm",
    "map_info_norm",
]
N_FEATURES = len(FEATURE_NAMES)

MISSING_MARKERS = {"", "NA"}
BASES = "ACGT"


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class CohortTable:
    """Sample x CpG beta matrix plus per-sample metadata.

    ``beta`` holds NaN for missing cells prior to imputation.
    """

    sample_ids: tuple[str, ...]
    ages: np.ndarray          # (M,) years, >= 0
    sex: tuple[str, ...]      # male / female / unknown
    disease: tuple[str, ...]  # "healthy" or a disease label
    dataset_ids: tuple[str, ...]
    cpg_ids: tuple[str, ...]
    beta: np.ndarray          # (M, N) in [0,1], NaN = missing

    def __post_init__(self):
        m, n = self.beta.shape
        if len(self.sample_ids) != m or self.ages.shape != (m,):
            raise IngestError("metadata row count does not match beta row count")
        if len(self.cpg_ids) != n:
            raise IngestError("cpg id count does not match beta column count")
        if np.any(self.ages < 0):
            raise IngestError("ages must be non-negative")

    @property
    def n_samples(self) -> int:
        return self.beta.shape[0]

    @property
    def n_cpgs(self) -> int:
        return self.beta.shape[1]

    def healthy_mask(self) -> np.ndarray:
        return np.array([d == "healthy" for d in self.disease])

    def index_of(self, sample_id: str) -> int:
        try:
            return self.sample_ids.index(sample_id)
        except ValueError:
            raise KeyError(f"unknown sample id: {sample_id}") from None


@dataclass(frozen=True)
class CpGAnnotation:
    cpg_id: str
    chromosome: str
    map_info: int
    gene: str | None = None
    in_island: bool = False
    island_start: int | None = None
    island_end: int | None = None
    next_base: str = "C"
    tss_distance: float | None = None

    def __post_init__(self):
        if self.next_base not in BASES:
            raise IngestError(f"{self.cpg_id}: unknown next base {self.next_base!r}")
        has_bounds = self.island_start is not None and self.island_end is not None
        if self.in_island != has_bounds:
            raise IngestError(
                f"{self.cpg_id}: island bounds must be present iff in_island is set")
        if has_bounds and self.island_start > self.island_end:
            raise IngestError(f"{self.cpg_id}: island_start > island_end")

    @property
    def island_length(self) -> int:
        if not self.in_island:
            return 0
        return self.island_end - self.island_start


@dataclass(frozen=True)
class NodeFeatureTemplate:
    """Static per-site feature block; methylation is filled in per sample."""

    cpg_ids: tuple[str, ...]
    static: np.ndarray  # (N, N_FEATURES - 1), columns FEATURE_NAMES[1:]

    def instantiate(self, beta_row: np.ndarray) -> np.ndarray:
        """Full (N, 11) feature matrix for one sample's beta column."""
        beta_row = np.asarray(beta_row, dtype=np.float64)
        if beta_row.shape != (len(self.cpg_ids),):
            raise IngestError("beta row length does not match template")
        return np.column_stack([beta_row, self.static])


def _parse_beta_cell(raw: str, where: str) -> float:
    raw = raw.strip()
    if raw in MISSING_MARKERS:
        return np.nan
    try:
        v = float(raw)
    except ValueError:
        raise IngestError(f"{where}: unreadable beta value {raw!r}") from None
    if not 0.0 <= v <= 1.0:
        raise IngestError(f"{where}: beta value {v} outside [0,1]")
    return v


def parse_cohort(beta_file, metadata_file) -> CohortTable:
    """Read the beta matrix and metadata CSVs into a CohortTable.

    The beta file's first row lists CpG ids, its first column sample ids.
    Sample order follows the beta file; every beta row must have a matching
    metadata record and vice versa.
    """
    with open(beta_file, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestError(f"{beta_file}: empty beta file")
    cpg_ids = tuple(c.strip() for c in rows[0][1:])
    sample_ids: list[str] = []
    beta = np.empty((len(rows) - 1, len(cpg_ids)))
    for r, row in enumerate(rows[1:], start=1):
        sid = row[0].strip()
        if sid in sample_ids:
            raise IngestError(f"{beta_file}: duplicate sample id {sid!r}")
        if len(row) - 1 != len(cpg_ids):
            raise IngestError(f"{beta_file}: row {sid!r} has {len(row) - 1} cells, "
                              f"expected {len(cpg_ids)}")
        sample_ids.append(sid)
        for c, raw in enumerate(row[1:]):
            beta[r - 1, c] = _parse_beta_cell(raw, f"{sid}/{cpg_ids[c]}")

    meta: dict[str, dict] = {}
    with open(metadata_file, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"sample_id", "age", "sex", "disease", "dataset_id"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise IngestError(f"{metadata_file}: missing columns "
                              f"{sorted(required - set(reader.fieldnames or []))}")
        for rec in reader:
            sid = rec["sample_id"].strip()
            if sid in meta:
                raise IngestError(f"{metadata_file}: duplicate sample id {sid!r}")
            if sid not in sample_ids:
                raise IngestError(f"{metadata_file}: sample {sid!r} has no beta row")
            meta[sid] = rec
    missing = [s for s in sample_ids if s not in meta]
    if missing:
        raise IngestError(f"{metadata_file}: no metadata for samples {missing}")

    ages = np.array([float(meta[s]["age"]) for s in sample_ids])
    sex = tuple(meta[s]["sex"].strip().lower() or "unknown" for s in sample_ids)
    disease = tuple(meta[s]["disease"].strip() or "healthy" for s in sample_ids)
    dataset_ids = tuple(meta[s]["dataset_id"].strip() for s in sample_ids)
    return CohortTable(tuple(sample_ids), ages, sex, disease, dataset_ids,
                       cpg_ids, beta)


def _parse_opt_int(raw: str) -> int | None:
    raw = raw.strip()
    return None if raw in MISSING_MARKERS else int(float(raw))


def _parse_opt_float(raw: str) -> float | None:
    raw = raw.strip()
    return None if raw in MISSING_MARKERS else float(raw)


def parse_annotations(annot_file) -> list[CpGAnnotation]:
    """Read per-site annotations; file order defines node indices 0..N-1."""
    out: list[CpGAnnotation] = []
    seen: set[str] = set()
    with open(annot_file, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"cpg_id", "chromosome", "map_info", "gene", "in_island",
                    "island_start", "island_end", "next_base", "tss_distance"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise IngestError(f"{annot_file}: missing columns "
                              f"{sorted(required - set(reader.fieldnames or []))}")
        for rec in reader:
            cpg_id = rec["cpg_id"].strip()
            if cpg_id in seen:
                raise IngestError(f"{annot_file}: duplicate cpg_id {cpg_id!r}")
            seen.add(cpg_id)
            gene = rec["gene"].strip()
            out.append(CpGAnnotation(
                cpg_id=cpg_id,
                chromosome=rec["chromosome"].strip(),
                map_info=int(float(rec["map_info"])),
                gene=gene if gene not in MISSING_MARKERS else None,
                in_island=rec["in_island"].strip() in ("1", "true", "True"),
                island_start=_parse_opt_int(rec["island_start"]),
                island_end=_parse_opt_int(rec["island_end"]),
                next_base=rec["next_base"].strip().upper(),
                tss_distance=_parse_opt_float(rec["tss_distance"]),
            ))
    return out


def knn_impute(cohort: CohortTable, k: int = 5) -> CohortTable:
    """Replace each missing beta cell with the mean over the k nearest samples.

    Sample distance is the root mean squared difference over sites observed
    in both samples; only neighbours with the target site observed are
    candidates.  With fewer than k candidates all available ones are used
    (with a warning).  Observed entries pass through unchanged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    beta = cohort.beta
    missing = np.isnan(beta)
    if not missing.any():
        return cohort
    m = beta.shape[0]
    if m < k + 1:
        raise IngestError(f"need at least k+1={k + 1} samples, have {m}")
    all_missing = np.where(missing.all(axis=0))[0]
    if all_missing.size:
        names = [cohort.cpg_ids[c] for c in all_missing]
        raise IngestError(f"sites missing in every sample: {names}")

    observed = ~missing
    # pairwise RMS distance over mutually observed sites
    filled = np.where(observed, beta, 0.0)
    shared = observed.astype(np.float64) @ observed.T.astype(np.float64)
    sq = (filled ** 2) @ observed.T.astype(np.float64)
    cross = filled @ filled.T
    ssd = sq + sq.T - 2.0 * cross
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.sqrt(np.maximum(ssd, 0.0) / shared)
    dist[shared == 0] = np.inf

    out = beta.copy()
    for s, c in zip(*np.nonzero(missing)):
        candidates = np.where(observed[:, c])[0]
        d = dist[s, candidates]
        finite = np.isfinite(d)
        candidates, d = candidates[finite], d[finite]
        if candidates.size == 0:
            raise IngestError(
                f"no usable neighbour for sample {cohort.sample_ids[s]!r}, "
                f"site {cohort.cpg_ids[c]!r}")
        if candidates.size < k:
            warnings.warn(f"only {candidates.size} neighbour candidates for "
                          f"({cohort.sample_ids[s]}, {cohort.cpg_ids[c]}); using all")
            chosen = candidates
        else:
            order = np.lexsort((candidates, d))  # distance, then sample index
            chosen = candidates[order[:k]]
        out[s, c] = beta[chosen, c].mean()
    return replace(cohort, beta=out)


def build_node_features(annots: list[CpGAnnotation]) -> NodeFeatureTemplate:
    """Assemble the static N x 10 feature block from annotations.

    Positions are normalized per chromosome, island bounds by the largest
    island end in the cohort, island length by the largest island, and TSS
    distance by the largest observed distance (missing distances map to 1,
    the maximum).  Sites outside islands get zeros for all island columns.
    """
    n = len(annots)
    static = np.zeros((n, N_FEATURES - 1))
    max_pos: dict[str, int] = {}
    for a in annots:
        max_pos[a.chromosome] = max(max_pos.get(a.chromosome, 0), a.map_info)
    max_island_len = max((a.island_length for a in annots if a.in_island), default=0)
    max_island_end = max((a.island_end for a in annots if a.in_island), default=0)
    max_tss = max((a.tss_distance for a in annots if a.tss_distance is not None),
                  default=0.0)

    for i, a in enumerate(annots):
        row = static[i]
        row[0] = 1.0 if a.in_island else 0.0
        if a.in_island:
            row[1] = a.island_length / max_island_len if max_island_len else 0.0
            row[6] = a.island_start / max_island_end if max_island_end else 0.0
            row[7] = a.island_end / max_island_end if max_island_end else 0.0
        row[2 + BASES.index(a.next_base)] = 1.0
        row[8] = 1.0 if a.tss_distance is None else (
            a.tss_distance / max_tss if max_tss else 0.0)
        row[9] = a.map_info / max_pos[a.chromosome] if max_pos[a.chromosome] else 0.0
    return NodeFeatureTemplate(tuple(a.cpg_id for a in annots), static)


@dataclass(frozen=True)
class SynthConfig:
    n_cpg: int = 300
    m_samples: int = 1000
    n_clock_sites: int = 60
    noise_sd: float = 0.03
    n_chromosomes: int = 15
    n_genes: int = 40
    disease_shift_years: float = 0.0
    disease_fraction: float = 0.0
    age_min: float = 0.0
    age_max: float = 90.0

    def __post_init__(self):
        if self.n_clock_sites > self.n_cpg:
            raise ValueError("n_clock_sites cannot exceed n_cpg")
        if not 0.0 <= self.disease_fraction <= 1.0:
            raise ValueError("disease_fraction must be in [0,1]")


@dataclass(frozen=True)
class SynthTruth:
    """Generator ground truth, for oracle baselines and recovery checks."""

    clock_sites: np.ndarray   # node indices carrying the aging signal
    intercepts: np.ndarray    # a_c per clock site
    slopes: np.ndarray        # b_c per clock site
    baselines: np.ndarray     # constant level of every non-clock site
    noise_sd: float
    disease_shift_years: float


def _logistic(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def synth_cohort(config: SynthConfig, seed: int
                 ) -> tuple[CohortTable, list[CpGAnnotation], SynthTruth]:
    """Generate a deterministic synthetic cohort with a planted clock signal.

    Clock sites follow logistic(a_c + b_c * effective_age) plus Gaussian
    noise, clipped to [0,1]; effective age adds ``disease_shift_years`` for
    disease samples.  Non-clock sites are noise around a per-site constant.
    """
    rng = np.random.default_rng(seed)
    cfg = config

    ages = rng.uniform(cfg.age_min, cfg.age_max, size=cfg.m_samples)
    is_disease = rng.random(cfg.m_samples) < cfg.disease_fraction
    eff_age = ages + np.where(is_disease, cfg.disease_shift_years, 0.0)

    clock_sites = np.sort(rng.choice(cfg.n_cpg, size=cfg.n_clock_sites, replace=False))
    midpoints = rng.uniform(cfg.age_min + 10.0, cfg.age_max - 10.0,
                            size=cfg.n_clock_sites)
    slopes = rng.uniform(0.02, 0.05, size=cfg.n_clock_sites)
    slopes *= rng.choice([-1.0, 1.0], size=cfg.n_clock_sites)
    intercepts = -slopes * midpoints
    baselines = rng.uniform(0.1, 0.9, size=cfg.n_cpg)

    beta = np.clip(
        baselines[None, :] + rng.normal(0.0, cfg.noise_sd,
                                        size=(cfg.m_samples, cfg.n_cpg)),
        0.0, 1.0)
    signal = _logistic(intercepts[None, :] + slopes[None, :] * eff_age[:, None])
    beta[:, clock_sites] = np.clip(
        signal + rng.normal(0.0, cfg.noise_sd,
                            size=(cfg.m_samples, cfg.n_clock_sites)),
        0.0, 1.0)

    chrom = rng.integers(0, cfg.n_chromosomes, size=cfg.n_cpg)
    has_gene = rng.random(cfg.n_cpg) < 0.7
    gene_of = rng.integers(0, cfg.n_genes, size=cfg.n_cpg)
    in_island = rng.random(cfg.n_cpg) < 0.5
    positions = rng.integers(10_000, 10_000_000, size=cfg.n_cpg)
    has_tss = rng.random(cfg.n_cpg) < 0.8
    tss = rng.integers(0, 5000, size=cfg.n_cpg)
    bases = rng.integers(0, 4, size=cfg.n_cpg)
    island_len = rng.integers(200, 2000, size=cfg.n_cpg)

    annots = []
    for i in range(cfg.n_cpg):
        start = int(positions[i]) - int(island_len[i]) // 2
        annots.append(CpGAnnotation(
            cpg_id=f"cg{i:08d}",
            chromosome=f"chr{int(chrom[i]) + 1}",
            map_info=int(positions[i]),
            gene=f"GENE{int(gene_of[i]):03d}" if has_gene[i] else None,
            in_island=bool(in_island[i]),
            island_start=start if in_island[i] else None,
            island_end=start + int(island_len[i]) if in_island[i] else None,
            next_base=BASES[int(bases[i])],
            tss_distance=float(tss[i]) if has_tss[i] else None,
        ))

    cohort = CohortTable(
        sample_ids=tuple(f"S{i:05d}" for i in range(cfg.m_samples)),
        ages=ages,
        sex=tuple(str(s) for s in rng.choice(["male", "female"],
                                             size=cfg.m_samples)),
        disease=tuple("disease" if d else "healthy" for d in is_disease),
        dataset_ids=("synth",) * cfg.m_samples,
        cpg_ids=tuple(a.cpg_id for a in annots),
        beta=beta,
    )
    truth = SynthTruth(clock_sites, intercepts, slopes, baselines,
                       cfg.noise_sd, cfg.disease_shift_years)
    return cohort, annots, truth


def oracle_predict(truth: SynthTruth, beta: np.ndarray) -> np.ndarray:
    """Invert the generator per clock site and average the age estimates.

    This is the idealized baseline for the synthetic benchmark: it knows the
    generating parameters exactly, so a trained model is only expected to get
    within a constant factor of its error.
    """
    clipped = np.clip(beta[:, truth.clock_sites], 1e-6, 1.0 - 1e-6)
    logit = np.log(clipped / (1.0 - clipped))
    per_site = (logit - truth.intercepts[None, :]) / truth.slopes[None, :]
    return per_site.mean(axis=1)


def write_cohort_csv(cohort: CohortTable, beta_file, metadata_file) -> None:
    with open(beta_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", *cohort.cpg_ids])
        for i, sid in enumerate(cohort.sample_ids):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in cohort.beta[i]]
            w.writerow([sid, *cells])
    with open(metadata_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "age", "sex", "disease", "dataset_id"])
        for i, sid in enumerate(cohort.sample_ids):
            w.writerow([sid, repr(float(cohort.ages[i])), cohort.sex[i],
                        cohort.disease[i], cohort.dataset_ids[i]])


def write_annotations_csv(annots: list[CpGAnnotation], annot_file) -> None:
    with open(annot_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cpg_id", "chromosome", "map_info", "gene", "in_island",
                    "island_start", "island_end", "next_base", "tss_distance"])
        for a in annots:
            w.writerow([
                a.cpg_id, a.chromosome, a.map_info, a.gene or "",
                int(a.in_island),
                "" if a.island_start is None else a.island_start,
                "" if a.island_end is None else a.island_end,
                a.next_base,
                "" if a.tss_distance is None else repr(float(a.tss_distance)),
            ])
