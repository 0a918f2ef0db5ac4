"""Synthetic cohorts with a planted functional-connectivity effect.

Each scan is ``T`` i.i.d. draws from a zero-mean Gaussian whose correlation
matrix has ``rho_in`` within subnets and ``rho_out`` between them. Patients
(label 1) get ``+effect_size`` on the block between the two planted subnets.
Every subject carries its own small symmetric jitter of the correlation
matrix, shared by all of that subject's scans.
"""
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .connectome import (Parcellation, RoiTimeSeries, load_parcellation, load_roi_series,
                         write_parcellation, write_roi_series)
from .errors import ConfigError, InputIOError, ValidationError

PSD_FLOOR = 1e-8


@dataclass
class SynthConfig:
    subjects_per_class: int = 40
    scans_per_subject: int = 2
    n_time: int = 64
    rois_per_subnet: int = 3
    parcellation: str = ""  # path; empty means uniform blocks of rois_per_subnet
    planted_pair: tuple = ("DAN", "LIM")
    effect_size: float = 0.35
    rho_in: float = 0.5
    rho_out: float = 0.1
    noise_scale: float = 0.0
    subject_jitter: float = 0.02
    psd_tolerance: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.planted_pair, str):
            self.planted_pair = tuple(p.strip() for p in self.planted_pair.split(","))
        self.planted_pair = tuple(self.planted_pair)

    def validate(self):
        if self.subjects_per_class < 1 or self.scans_per_subject < 1:
            raise ConfigError("need at least one subject per class and one scan per subject")
        if self.n_time < 3:
            raise ConfigError(f"n_time must be >= 3, got {self.n_time}")
        if not 0.0 <= self.rho_out < self.rho_in < 1.0:
            raise ConfigError(f"need 0 <= rho_out < rho_in < 1, got {self.rho_out}, {self.rho_in}")
        if not 0.0 <= self.effect_size < 1.0:
            raise ConfigError(f"effect_size must lie in [0, 1), got {self.effect_size}")
        if len(self.planted_pair) != 2 or self.planted_pair[0] == self.planted_pair[1]:
            raise ConfigError(f"planted_pair must name two distinct subnets, got {self.planted_pair}")
        if self.noise_scale < 0 or self.subject_jitter < 0:
            raise ConfigError("noise_scale and subject_jitter must be non-negative")
        return self

    def to_dict(self):
        d = asdict(self)
        d["planted_pair"] = list(self.planted_pair)
        return d

    def make_parcellation(self):
        if self.parcellation:
            return load_parcellation(self.parcellation)
        if self.rois_per_subnet < 1:
            raise ConfigError("rois_per_subnet must be >= 1")
        return Parcellation.uniform(self.rois_per_subnet)


def block_correlation(parc, rho_in, rho_out, planted=None, effect=0.0):
    a = parc.assignment
    same = a[:, None] == a[None, :]
    c = np.where(same, rho_in, rho_out)
    if planted is not None and effect:
        p, q = planted
        block = (a[:, None] == p) & (a[None, :] == q)
        block |= block.T
        c = c + effect * block
    np.fill_diagonal(c, 1.0)
    return c


def repair_psd(c, floor=PSD_FLOOR):
    """Clip eigenvalues at ``floor`` and rescale back to unit diagonal."""
    w, v = np.linalg.eigh(c)
    if w.min() >= floor:
        return c.copy()
    fixed = (v * np.maximum(w, floor)) @ v.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    fixed = 0.5 * (fixed + fixed.T)
    np.fill_diagonal(fixed, 1.0)
    return fixed


def _checked_target(c, tol, what):
    fixed = repair_psd(c)
    dev = float(np.max(np.abs(fixed - c)))
    if dev > tol:
        raise ConfigError(f"{what} correlation is not PSD (repair moves entries by {dev:.3g} > {tol})")
    return fixed


def population_correlations(cfg, parc):
    """Control and patient population correlation matrices (PSD-checked)."""
    cfg.validate()
    planted = tuple(parc.subnet_index(s) for s in cfg.planted_pair)
    base = block_correlation(parc, cfg.rho_in, cfg.rho_out)
    if np.linalg.eigvalsh(base).min() < -1e-12:
        raise ConfigError("control correlation matrix is not PSD")
    patient = block_correlation(parc, cfg.rho_in, cfg.rho_out, planted, cfg.effect_size)
    return base, _checked_target(patient, cfg.psd_tolerance, "patient")


def _sample_scan(rng, chol, n_time, noise_scale):
    n = chol.shape[0]
    for _ in range(100):
        x = chol @ rng.standard_normal((n, n_time))
        if noise_scale:
            x = x + noise_scale * rng.standard_normal((n, n_time))
        if np.all(np.ptp(x, axis=1) > 0):
            return x
    raise ValidationError("could not draw a non-degenerate scan")  # pragma: no cover


def generate_cohort(cfg, parc=None):
    """Return ``(scans, parcellation)`` for a synthetic cohort."""
    cfg.validate()
    parc = parc or cfg.make_parcellation()
    base, patient = population_correlations(cfg, parc)
    n = parc.roi_count
    n_subj = 2 * cfg.subjects_per_class
    subject_seeds = nx.derive_seeds(cfg.seed, n_subj, purpose=10)
    scans = []
    for j, seed in enumerate(subject_seeds):
        label = 0 if j < cfg.subjects_per_class else 1
        rng = nx.make_rng(seed)
        jitter = rng.standard_normal((n, n)) * cfg.subject_jitter
        jitter = np.triu(jitter, 1)
        jitter = jitter + jitter.T
        target = (patient if label else base) + jitter
        chol = np.linalg.cholesky(repair_psd(target) + 1e-12 * np.eye(n))
        subject = f"sub-{j:03d}"
        for s in range(cfg.scans_per_subject):
            x = _sample_scan(rng, chol, cfg.n_time, cfg.noise_scale)
            scans.append(RoiTimeSeries(f"{subject}_ses-{s + 1}", subject, label, x))
    return scans, parc


# ------------------------------------------------------------ cohort directory IO


def write_cohort(out_dir, scans, parc):
    out = Path(out_dir)
    if not out.is_dir():
        raise InputIOError(f"output directory does not exist: {out}")
    sdir = out / "scans"
    sdir.mkdir(exist_ok=True)
    write_parcellation(out / "parcellation.csv", parc)
    for ts in scans:
        write_roi_series(sdir / f"{ts.scan_id}.csv", ts)
    return out


def load_cohort(cohort_dir):
    """Read ``parcellation.csv`` and ``scans/*.csv`` from a cohort directory."""
    root = Path(cohort_dir)
    if not root.is_dir():
        raise InputIOError(f"cohort directory does not exist: {root}")
    parc_path = root / "parcellation.csv"
    parc = load_parcellation(parc_path) if parc_path.exists() else load_parcellation()
    sdir = root / "scans"
    scans = load_roi_series(sdir if sdir.is_dir() else root, n_roi=parc.roi_count)
    return scans, parc
