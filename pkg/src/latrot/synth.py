"""Synthetic embeddings with planted biological and technical factors.

Each record is generated as::

    z = B @ b[a] + tech_strength * T @ (t[p] + S @ u) + eps

``B`` and ``T`` are orthonormal, mutually orthogonal bases. ``b[a]`` is the
biological code of anatomy site ``a``, ``t[p]`` the offset of protocol ``p``
and ``u ~ N(0, I)`` a per-acquisition technical perturbation with diagonal
scales ``S`` decaying linearly from ``tech_jitter`` to
``tech_jitter * jitter_floor``. The perturbation stands in for dose, noise
and positioning differences between acquisitions; it makes technical
variation span every technical dimension even with two protocols.
With ``tech_jitter=0`` the model reduces to a pure protocol offset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .dataio import EmbeddingSet
from .exceptions import ConfigError, DataError


@dataclass
class SurvivalConfig:
    base_hazard: float = 1e-3
    effect_cluster: Union[int, list] = 0
    effect_size: float = float(np.log(2.0))
    censor_quantile: float = 0.9
    horizon: Optional[float] = None
    enrichment: float = 3.0

    def validate(self):
        if self.base_hazard <= 0:
            raise ConfigError("survival.base_hazard must be positive")
        if not 0 < self.censor_quantile <= 1:
            raise ConfigError("survival.censor_quantile must lie in (0, 1]")
        if self.horizon is not None and self.horizon <= 0:
            raise ConfigError("survival.horizon must be positive")
        if self.enrichment <= 0:
            raise ConfigError("survival.enrichment must be positive")

    @property
    def effect_sites(self) -> list[int]:
        ec = self.effect_cluster
        return [int(ec)] if np.isscalar(ec) else [int(s) for s in ec]


@dataclass
class SynthConfig:
    m: int = 64
    n_anatomy: int = 40
    n_protocols: int = 2
    n_patients: int = 50
    d_bio: int = 10
    d_tech: int = 5
    noise_sigma: float = 0.05
    tech_strength: float = 3.0
    tech_jitter: float = 0.5
    jitter_floor: float = 0.3
    sites_per_patient: Optional[int] = None
    survival: Optional[SurvivalConfig] = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.survival, dict):
            self.survival = SurvivalConfig(**self.survival)

    def validate(self) -> "SynthConfig":
        for name in ("m", "n_anatomy", "n_protocols", "n_patients", "d_bio", "d_tech"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be >= 1")
        if self.d_bio + self.d_tech > self.m:
            raise ConfigError(f"d_bio + d_tech = {self.d_bio + self.d_tech} exceeds m = {self.m}")
        if self.noise_sigma < 0:
            raise ConfigError("synth.noise_sigma must be non-negative")
        if self.tech_strength <= 0:
            raise ConfigError("synth.tech_strength must be positive")
        if self.tech_jitter < 0:
            raise ConfigError("synth.tech_jitter must be non-negative")
        if not 0 <= self.jitter_floor <= 1:
            raise ConfigError("synth.jitter_floor must lie in [0, 1]")
        if self.sites_per_patient is not None and not 1 <= self.sites_per_patient <= self.n_anatomy:
            raise ConfigError("synth.sites_per_patient must lie in [1, n_anatomy]")
        if self.seed < 0:
            raise ConfigError("synth.seed must be non-negative")
        if self.survival is not None:
            self.survival.validate()
            bad = [s for s in self.survival.effect_sites if not 0 <= s < self.n_anatomy]
            if bad:
                raise ConfigError(f"survival.effect_cluster sites {bad} outside [0, n_anatomy)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroundTruth:
    T_basis: np.ndarray
    B_basis: np.ndarray
    anatomy_codes: np.ndarray
    protocol_offsets: np.ndarray
    jitter_scales: np.ndarray
    patient_covariate: np.ndarray
    tech_strength: float = 1.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "T_basis": self.T_basis.tolist(),
            "B_basis": self.B_basis.tolist(),
            "anatomy_codes": self.anatomy_codes.tolist(),
            "protocol_offsets": self.protocol_offsets.tolist(),
            "jitter_scales": self.jitter_scales.tolist(),
            "patient_covariate": self.patient_covariate.tolist(),
            "tech_strength": self.tech_strength,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        m = len(d["T_basis"])
        return cls(
            T_basis=arr("T_basis").reshape(m, -1),
            B_basis=arr("B_basis").reshape(m, -1),
            anatomy_codes=arr("anatomy_codes"),
            protocol_offsets=arr("protocol_offsets"),
            jitter_scales=arr("jitter_scales"),
            patient_covariate=arr("patient_covariate"),
            tech_strength=float(d["tech_strength"]),
            extra=dict(d.get("extra", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_synth_config(path) -> SynthConfig:
    return SynthConfig.from_dict(json.loads(Path(path).read_text())).validate()


def _streams(seed: int):
    names = ("bases", "codes", "patients", "noise", "survival")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def site_name(a: int) -> str:
    return f"a{a:03d}"


def protocol_name(p: int) -> str:
    return f"p{p}"


def patient_name(i: int) -> str:
    return f"pt{i:04d}"


def generate(config: SynthConfig) -> tuple[EmbeddingSet, GroundTruth]:
    """Draw a dataset and its ground truth; identical configs give identical output."""
    cfg = config.validate()
    rng = _streams(cfg.seed)

    gauss = rng["bases"].standard_normal((cfg.m, cfg.d_tech + cfg.d_bio))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))
    T, B = q[:, : cfg.d_tech], q[:, cfg.d_tech:]

    codes = rng["codes"].standard_normal((cfg.n_anatomy, cfg.d_bio))
    offsets = rng["codes"].standard_normal((cfg.n_protocols, cfg.d_tech))
    scales = cfg.tech_jitter * np.linspace(1.0, cfg.jitter_floor, cfg.d_tech)

    covariate = (rng["patients"].random(cfg.n_patients) < 0.5).astype(np.float64)
    n_sites = cfg.n_anatomy if cfg.sites_per_patient is None else cfg.sites_per_patient
    effect = cfg.survival.effect_sites if cfg.survival is not None else []
    patient_sites = []
    for i in range(cfg.n_patients):
        if n_sites == cfg.n_anatomy:
            patient_sites.append(np.arange(cfg.n_anatomy))
            continue
        w = np.ones(cfg.n_anatomy)
        if covariate[i] == 1 and effect:
            w[effect] = cfg.survival.enrichment
        chosen = rng["patients"].choice(cfg.n_anatomy, size=n_sites, replace=False, p=w / w.sum())
        patient_sites.append(np.sort(chosen))

    site_idx = np.concatenate([np.repeat(s, cfg.n_protocols) for s in patient_sites])
    prot_idx = np.concatenate([np.tile(np.arange(cfg.n_protocols), len(s)) for s in patient_sites])
    pat_idx = np.concatenate([np.full(len(s) * cfg.n_protocols, i) for i, s in enumerate(patient_sites)])
    n = site_idx.shape[0]
    tech = offsets[prot_idx]
    if cfg.tech_jitter > 0:
        tech = tech + rng["noise"].standard_normal((n, cfg.d_tech)) * scales
    vectors = codes[site_idx] @ B.T + cfg.tech_strength * tech @ T.T
    if cfg.noise_sigma > 0:
        vectors = vectors + cfg.noise_sigma * rng["noise"].standard_normal((n, cfg.m))

    emb = EmbeddingSet(
        record_ids=np.arange(n, dtype=np.int64),
        vectors=vectors,
        anatomy_id=[site_name(a) for a in site_idx],
        protocol_id=[protocol_name(p) for p in prot_idx],
        patient_id=[patient_name(i) for i in pat_idx],
        m=cfg.m,
    )
    truth = GroundTruth(
        T_basis=T,
        B_basis=B,
        anatomy_codes=codes,
        protocol_offsets=offsets,
        jitter_scales=scales,
        patient_covariate=covariate,
        tech_strength=cfg.tech_strength,
        extra={"seed": cfg.seed},
    )
    if cfg.survival is not None:
        emb = generate_survival(emb, truth, cfg)
    return emb, truth


def draw_event_times(covariate: np.ndarray, surv: SurvivalConfig, rng: np.random.Generator):
    """Exponential event times with administrative censoring.

    Returns ``(time, event)``; ``event`` is 0 where the horizon censors.
    """
    hazard = surv.base_hazard * np.exp(surv.effect_size * covariate)
    t = rng.standard_exponential(covariate.shape[0]) / hazard
    horizon = surv.horizon if surv.horizon is not None else float(np.quantile(t, surv.censor_quantile))
    event = (t <= horizon).astype(np.int8)
    return np.minimum(t, horizon), event


def generate_survival(emb: EmbeddingSet, truth: GroundTruth, config: SynthConfig) -> EmbeddingSet:
    """Attach per-patient (survival_time, event) driven by the planted covariate."""
    if config.survival is None:
        raise ConfigError("survival section missing from synth config")
    config.survival.validate()
    rng = _streams(config.seed)["survival"]
    patients = emb.patient_vocab
    idx = np.array([int(p[2:]) for p in patients]) if all(p.startswith("pt") for p in patients) else None
    if idx is None or idx.max(initial=-1) >= truth.patient_covariate.shape[0]:
        raise DataError("patient ids do not match the ground-truth patient table")
    x = truth.patient_covariate[idx]
    t, e = draw_event_times(x, config.survival, rng)
    codes = emb.codes("patient_id")
    return emb.with_survival(t[codes], e[codes])
