"""Command-line pipeline: synth, pairs, fit-rotation, project, cluster, stability,
classify-protocol, cox, and pipeline (all stages in order).

Artifacts land in ``--out``; every stage reads its inputs from there, so a
single stage can be rerun in isolation. Logs go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .baselines import harmonize
from .clustering import assign, cluster_profiles, fit_cluster_model, write_label_map
from .config import ExperimentConfig, explain, load_config
from .dataio import EmbeddingSet, load_embeddings, save_embeddings
from .exceptions import ConfigError, DataError, LatrotError, NumericalError
from .metrics import (
    stability_reports,
    subspace_classifier_eval,
    summarize,
    write_classification_csv,
    write_stability_csv,
)
from .pairing import PairSet, build_pair_set
from .rotation import Projector, fit_rotation, split
from .survival import HRRow, cox_fit, hr_report, profile_matrix, survival_table
from .synth import generate

logger = logging.getLogger("latrot")

FILES = {
    "embeddings": "embeddings.bin",
    "embeddings_csv": "embeddings.csv",
    "truth": "ground_truth.json",
    "pairs": "pairs.bin",
    "projector": "projector.bin",
    "projector_csv": "projector.csv",
    "zT": "embeddings_zT.bin",
    "zB": "embeddings_zB.bin",
    "cluster_model": "cluster_model.bin",
    "centroids": "centroids.csv",
    "labels": "labels.csv",
    "profiles": "profiles.csv",
    "stability": "stability.csv",
    "classification": "protocol_classification.csv",
    "cox": "cox_hr.csv",
    "config": "config.json",
}


def _path(cfg: ExperimentConfig, key: str) -> Path:
    return Path(cfg.out) / FILES[key]


def _require(path: Path, stage: str) -> Path:
    if not path.is_file():
        raise DataError(f"missing upstream artifact {path} (run `latrot {stage}` first)")
    return path


def _embeddings(cfg: ExperimentConfig) -> EmbeddingSet:
    if cfg.input is not None:
        return load_embeddings(cfg.input)
    return load_embeddings(_require(_path(cfg, "embeddings"), "synth"))


def _projector(cfg: ExperimentConfig) -> Projector:
    return Projector.load(_require(_path(cfg, "projector"), "fit-rotation"))


def patient_split(emb: EmbeddingSet, fraction: float, seed: int, tag: int):
    """Seeded partition of patients; returns boolean record masks ``(first, rest)``."""
    pats = emb.patient_vocab
    if len(pats) < 2:
        raise DataError("need at least two patients to split")
    rng = np.random.default_rng([seed, tag])
    perm = rng.permutation(len(pats))
    n_first = min(max(1, int(round(fraction * len(pats)))), len(pats) - 1)
    first = np.zeros(len(pats), dtype=bool)
    first[perm[:n_first]] = True
    mask = first[emb.codes("patient_id")]
    return mask, ~mask


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig) -> list[Path]:
    if cfg.input is not None:
        raise ConfigError("synth stage is not used with an external input file")
    emb, truth = generate(cfg.synth)
    save_embeddings(emb, _path(cfg, "embeddings"))
    save_embeddings(emb, _path(cfg, "embeddings_csv"))
    truth.save(_path(cfg, "truth"))
    logger.info("synthesised %d records (m=%d, %d patients)", len(emb), emb.m, len(emb.patient_vocab))
    return [_path(cfg, k) for k in ("embeddings", "embeddings_csv", "truth")]


def cmd_pairs(cfg: ExperimentConfig) -> list[Path]:
    emb = _embeddings(cfg)
    p = cfg.pairing
    pairs = build_pair_set(emb, p.n_pairs, p.rank_lo, p.rank_hi, p.neighbors, seed=cfg.seed, symmetrize=p.symmetrize)
    pairs.save(_path(cfg, "pairs"))
    return [_path(cfg, "pairs")]


def cmd_fit_rotation(cfg: ExperimentConfig) -> list[Path]:
    emb = _embeddings(cfg)
    pairs = PairSet.load(_require(_path(cfg, "pairs"), "pairs"))
    r = cfg.rotation
    proj = fit_rotation(emb, pairs, r=r.r, epochs=r.epochs, lr=r.lr, batch_size=r.batch_size, seed=cfg.seed,
                        val_fraction=r.val_fraction, l2=r.l2, offset_rule=r.offset_rule,
                        residual_source=r.residual_source)
    proj.save(_path(cfg, "projector"))
    proj.to_csv(_path(cfg, "projector_csv"))
    logger.info("projector r=%d, classifier val accuracy %.3f", proj.r, proj.provenance.get("val_accuracy", float("nan")))
    return [_path(cfg, "projector"), _path(cfg, "projector_csv")]


def cmd_project(cfg: ExperimentConfig) -> list[Path]:
    emb = _embeddings(cfg)
    z_t, z_b = split(emb.vectors, _projector(cfg))
    save_embeddings(emb.with_vectors(z_t), _path(cfg, "zT"))
    save_embeddings(emb.with_vectors(z_b), _path(cfg, "zB"))
    return [_path(cfg, "zT"), _path(cfg, "zB")]


def cmd_cluster(cfg: ExperimentConfig) -> list[Path]:
    z_b = load_embeddings(_require(_path(cfg, "zB"), "project"))
    c = cfg.clustering
    model = fit_cluster_model(z_b.vectors, c.k, c.metric, c.variance_target, cfg.seed, c.max_iter, c.restarts)
    labels = assign(model, z_b.vectors)
    model.save(_path(cfg, "cluster_model"))
    model.centroids_csv(_path(cfg, "centroids"))
    write_label_map(_path(cfg, "labels"), z_b, labels)
    with open(_path(cfg, "profiles"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id"] + [f"c{j}" for j in range(c.k)])
        for prof in cluster_profiles(labels, z_b, c.k):
            w.writerow([prof.patient_id] + [repr(float(v)) for v in prof.fractions])
    return [_path(cfg, k) for k in ("cluster_model", "centroids", "labels", "profiles")]


def cmd_stability(cfg: ExperimentConfig) -> list[Path]:
    emb = _embeddings(cfg)
    c = cfg.clustering
    kw = dict(k_values=c.k_values, seed=cfg.seed, metric=c.metric, variance_target=c.variance_target, restarts=c.restarts)
    _, z_b = split(emb.vectors, _projector(cfg))
    reports = stability_reports(emb.vectors, emb, "z", **kw)
    reports += stability_reports(z_b, emb, "zB", **kw)
    out = [_path(cfg, "stability")]
    for name in cfg.baselines:
        harm = harmonize(emb, name, seed=cfg.seed)
        path = Path(cfg.out) / f"harmonized_{name}.bin"
        save_embeddings(harm, path)
        out.append(path)
        reports += stability_reports(harm.vectors, emb, name, **kw)
    write_stability_csv(reports, out[0])
    for name, vals in summarize(reports).items():
        logger.info("stability %-7s ARI %.3f NMI %.3f Dice %.3f", name, vals["ari"], vals["nmi"], vals["dice"])
    return out


def cmd_classify_protocol(cfg: ExperimentConfig) -> list[Path]:
    emb = _embeddings(cfg)
    test, train = patient_split(emb, cfg.classify.test_fraction, cfg.seed, tag=1)
    res = subspace_classifier_eval(emb.subset(train), emb.subset(test), _projector(cfg), lam=cfg.classify.lam)
    write_classification_csv(res, _path(cfg, "classification"))
    logger.info("protocol accuracy zT %.3f z %.3f zB %.3f (chance %.3f)", res["acc_zT"], res["acc_z"], res["acc_zB"], res["chance"])
    return [_path(cfg, "classification")]


def cmd_cox(cfg: ExperimentConfig) -> list[Path]:
    """Centroids learned on discovery patients are applied unchanged to the outcome cohort."""
    emb = _embeddings(cfg)
    if not emb.has_survival.any():
        raise DataError("no survival outcomes in the embedding set; enable synth.survival or supply them")
    s, c = cfg.survival, cfg.clustering
    disc, outc = patient_split(emb, s.discovery_fraction, cfg.seed, tag=2)
    cohort = emb.subset(outc)
    pats, times, events = survival_table(cohort)
    _, z_b = split(emb.vectors, _projector(cfg))
    features = {"z": emb.vectors, "zB": z_b}
    rows = []
    for name in s.embeddings:
        X = features[name]
        for k in s.k_values:
            k = int(k)
            model = fit_cluster_model(X[disc], k, c.metric, c.variance_target, cfg.seed, c.max_iter, c.restarts)
            labels = assign(model, X[outc])
            prof = profile_matrix(cluster_profiles(labels, cohort, k))
            try:
                fit = cox_fit(prof, times, events, ridge=s.ridge)
                rows.append(HRRow(k, name, fit.hr_per_sd, fit.converged and fit.identifiable))
            except NumericalError as exc:
                logger.warning("cox fit failed for %s k=%d: %s", name, k, exc)
                rows.append(HRRow(k, name, float("nan"), False))
            logger.info("cox %-3s k=%-3d HR/sd %.3f", name, k, rows[-1].hr_per_sd)
    hr_report(rows, _path(cfg, "cox"))
    return [_path(cfg, "cox")]


STAGES: dict[str, Callable[[ExperimentConfig], list]] = {
    "synth": cmd_synth,
    "pairs": cmd_pairs,
    "fit-rotation": cmd_fit_rotation,
    "project": cmd_project,
    "cluster": cmd_cluster,
    "stability": cmd_stability,
    "classify-protocol": cmd_classify_protocol,
    "cox": cmd_cox,
}


def cmd_pipeline(cfg: ExperimentConfig) -> list[Path]:
    out = []
    for name, stage in STAGES.items():
        if name == "synth" and cfg.input is not None:
            continue
        if name == "cox" and cfg.input is None and cfg.synth.survival is None:
            logger.info("skipping cox: synthetic data carries no survival outcomes")
            continue
        t0 = time.perf_counter()
        out += stage(cfg)
        logger.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
    return out


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.synth.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.input is not None:
        cfg.input = args.input
    if args.r is not None:
        cfg.rotation.r = args.r
    if args.k_min is not None:
        cfg.clustering.k_min = args.k_min
    if args.k_max is not None:
        cfg.clustering.k_max = args.k_max
    if args.n_pairs is not None:
        cfg.pairing.n_pairs = args.n_pairs
    if args.baseline is not None:
        cfg.baselines = {"none": [], "all": ["combat", "coral"]}.get(args.baseline, [args.baseline])
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (default: bundled config)")
    common.add_argument("--seed", type=int, help="seed for every stage, synthetic data included")
    common.add_argument("--out", help="artifact directory")
    common.add_argument("--input", help="embedding file (.csv or binary) instead of synthetic data")
    common.add_argument("--r", type=int, help="technical subspace dimension")
    common.add_argument("--k-min", type=int, dest="k_min")
    common.add_argument("--k-max", type=int, dest="k_max")
    common.add_argument("--n-pairs", type=int, dest="n_pairs")
    common.add_argument("--baseline", choices=["combat", "coral", "all", "none"])
    common.add_argument("--explain-config", action="store_true", help="print settings with their provenance and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="latrot", description="Post-hoc technical/biological latent rotation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["pipeline"]:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.explain_config:
            sys.stdout.write(explain(cfg))
            return 0
        m = load_embeddings(cfg.input).m if cfg.input is not None else None
        cfg.validate(m)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        _path(cfg, "config").write_text(cfg.dumps())
        stage = cmd_pipeline if args.command == "pipeline" else STAGES[args.command]
        for path in stage(cfg):
            logger.debug("wrote %s", path)
    except LatrotError as exc:
        kind = {2: "config", 3: "data", 4: "numerical"}.get(exc.exit_code, "error")
        print(f"latrot: {kind} error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
