"""Command-line surface: fit, triage, evaluate, sweep, ablate,
kappa-scenarios and synth.

Config precedence is CLI flag over config-file value over default; the
effective analytic config (never filesystem paths) is echoed into every
output for provenance, as a JSON field or a leading ``#`` comment line.
Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .artifact import (
    CalibrationArtifact,
    FitConfig,
    fit_artifact,
    load_artifact,
    save_artifact,
)
from .dataset_io import Cohort, load_cohort
from .errors import ConfigError, DimensionMismatch, DualVetoError, ValidationError
from .geometry import fit_thresholds, l2_normalize_rows
from .dataset_io import aggregate_members, reference_embeddings
from .metrics import (
    DEFAULT_PENALTIES,
    OUTCOME_CODES,
    PENALTY_PRESETS,
    PRESET_TITLES,
    PenaltyMatrix,
    bootstrap,
    evaluate,
    f_beta,
    risk_kappa,
)
from .policy import DEFER, PolicyConfig, triage_cohort
from .synthgen import SynthConfig, generate_files
from . import metrics as _metrics

DECISION_COLUMNS = (
    "id",
    "outcome",
    "reason",
    "set_cardinality",
    "d_M",
    "tau",
    "confidence",
    "predicted_class",
)

CONFIG_KEYS = (
    "alpha",
    "percentile",
    "inertia",
    "min_cluster_size",
    "k_max",
    "policy",
    "penalties",
    "n_boot",
    "seed",
    "ece_bins",
)


@dataclass
class RunConfig:
    alpha: float = 0.05
    percentile: float = 99.0
    inertia: float = 0.05
    min_cluster_size: int | None = None
    k_max: int = 10
    policy: str = "hybrid"
    penalties: str = "default"
    n_boot: int = 1000
    seed: int = 0
    ece_bins: int = 10
    columns: dict | None = None
    synth: dict | None = None

    def echo(self) -> dict:
        return {
            "alpha": self.alpha,
            "percentile": self.percentile,
            "inertia": self.inertia,
            "min_cluster_size": self.min_cluster_size,
            "k_max": self.k_max,
            "policy": self.policy,
            "penalties": self.penalties,
            "n_boot": self.n_boot,
            "seed": self.seed,
            "ece_bins": self.ece_bins,
            "version": __version__,
        }

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            alpha=self.alpha,
            percentile=self.percentile,
            inertia_threshold=self.inertia,
            policy_kind=self.policy,
        )

    def fit_config(self) -> FitConfig:
        return FitConfig(
            percentile=self.percentile,
            inertia_threshold=self.inertia,
            min_cluster_size=self.min_cluster_size,
            k_max=self.k_max,
            seed=self.seed,
        )


def build_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig()
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in doc.items():
            if key in CONFIG_KEYS:
                setattr(config, key, value)
            elif key in ("columns", "synth"):
                setattr(config, key, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(config, key, value)
    return config


def resolve_penalties(spec: str) -> tuple[PenaltyMatrix, str]:
    """Preset name, or a JSON file with weight keys or a 2x3 matrix."""
    if spec in PENALTY_PRESETS:
        return PENALTY_PRESETS[spec], spec
    try:
        with open(spec, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError:
        raise ConfigError(
            f"penalties must name a preset {sorted(PENALTY_PRESETS)} or a JSON file, got {spec!r}"
        ) from None
    try:
        if isinstance(doc, dict):
            w = PenaltyMatrix.from_weights(
                fn=doc["fn"], fp=doc["fp"], def_tn=doc["def_tn"], def_tp=doc["def_tp"]
            )
        else:
            w = PenaltyMatrix(np.asarray(doc, dtype=np.float64))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad penalty file {spec}: {exc}") from None
    return w, f"file:{json.dumps(doc, sort_keys=True)}"


def _config_comment(config_echo: dict) -> str:
    return "config: " + json.dumps(config_echo, sort_keys=True)


def write_decisions(path: str, decisions, config_echo: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_config_comment(config_echo)}\n")
        fh.write(",".join(DECISION_COLUMNS) + "\n")
        for id_, d in decisions:
            fh.write(
                "%s,%s,%s,%d,%.17g,%.17g,%.17g,%d\n"
                % (
                    id_,
                    d.outcome,
                    d.reason or "",
                    d.set_cardinality,
                    d.d_m,
                    d.tau,
                    d.confidence,
                    d.predicted_class,
                )
            )


def read_decisions(path: str) -> dict[str, dict]:
    out: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = None
        for row in reader:
            if not row or row[0].startswith("#"):
                continue
            if header is None:
                header = row
                missing = [c for c in DECISION_COLUMNS if c not in header]
                if missing:
                    raise ValidationError(f"decisions file missing columns {missing}")
                pos = {c: header.index(c) for c in DECISION_COLUMNS}
                continue
            rec = {c: row[pos[c]] for c in DECISION_COLUMNS}
            if rec["outcome"] not in OUTCOME_CODES:
                raise ValidationError(f"unknown outcome {rec['outcome']!r} in {path}")
            out[rec["id"]] = {
                "outcome": OUTCOME_CODES[rec["outcome"]],
                "confidence": float(rec["confidence"]),
                "predicted_class": int(rec["predicted_class"]),
            }
    if header is None:
        raise ValidationError(f"decisions file {path} has no header")
    return out


def _eval_arrays(cohort: Cohort, decisions: dict[str, dict]):
    mask = cohort.split_mask("test") & (cohort.labels >= 0)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValidationError("cohort has no labeled test records")
    labels, outcome, conf, pred = [], [], [], []
    for i in idx:
        id_ = cohort.ids[i]
        if id_ not in decisions:
            raise ValidationError(f"no decision for labeled test id {id_!r}")
        d = decisions[id_]
        labels.append(int(cohort.labels[i]))
        outcome.append(d["outcome"])
        conf.append(d["confidence"])
        pred.append(d["predicted_class"])
    return (
        np.asarray(labels, dtype=np.intp),
        np.asarray(pred, dtype=np.intp),
        np.asarray(conf, dtype=np.float64),
        np.asarray(outcome, dtype=np.intp),
    )


def _load(args, config: RunConfig) -> Cohort:
    return load_cohort(args.cohort, columns=config.columns)


def cmd_synth(args) -> int:
    config = build_config(args)
    synth_kwargs = dict(config.synth or {})
    for key in ("n_train_per_class", "n_val_per_class", "n_test_per_class", "centroids_per_class"):
        if key in synth_kwargs:
            synth_kwargs[key] = tuple(synth_kwargs[key])
    if getattr(args, "seed", None) is not None:
        synth_kwargs["seed"] = args.seed
    try:
        synth_config = SynthConfig(**synth_kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from None
    truth_path = args.truth_out or args.out + ".truth.csv"
    echo = dataclasses.asdict(synth_config) | {"version": __version__}
    comment = _config_comment(echo)
    cohort, _ = generate_files(synth_config, args.out, truth_path, header_comment=comment)
    print(
        f"synth: wrote {cohort.n} ids ({cohort.n_members} members, d={cohort.d}) "
        f"to {args.out}; ground truth in {truth_path}"
    )
    return 0


def cmd_fit(args) -> int:
    config = build_config(args)
    cohort = _load(args, config)
    artifact = fit_artifact(cohort, config.fit_config())
    save_artifact(artifact, args.artifact)
    geo = artifact.geometry
    temps = ", ".join(f"{m}:{t.T:.4g}" for m, t in sorted(artifact.temperatures.items()))
    print(
        f"fit: temperatures {{{temps}}}; K_c={geo.k_per_class}; rho={geo.rho:.4g}; "
        f"taus=({geo.taus[0]:.4g}, {geo.taus[1]:.4g}); artifact {artifact.fingerprint} "
        f"-> {args.artifact}"
    )
    return 0


def _check_dimensions(cohort: Cohort, artifact: CalibrationArtifact) -> None:
    if cohort.d != artifact.d:
        raise DimensionMismatch(
            f"cohort embeddings have d={cohort.d} but artifact was fitted with d={artifact.d}"
        )
    if cohort.member_ids != artifact.member_ids:
        raise DimensionMismatch(
            f"cohort member_ids {cohort.member_ids} differ from artifact's {artifact.member_ids}"
        )


def cmd_triage(args) -> int:
    config = build_config(args)
    cohort = _load(args, config)
    artifact = load_artifact(args.artifact)
    _check_dimensions(cohort, artifact)
    decisions = triage_cohort(cohort, artifact, config.policy_config())
    echo = config.echo() | {"artifact_fingerprint": artifact.fingerprint}
    write_decisions(args.out, decisions, echo)
    n = len(decisions)
    clear = sum(1 for _, d in decisions if d.outcome != DEFER)
    reasons: dict[str, int] = {}
    for _, d in decisions:
        if d.reason:
            reasons[d.reason] = reasons.get(d.reason, 0) + 1
    reason_text = " ".join(f"{k}={v}" for k, v in sorted(reasons.items())) or "none"
    coverage = clear / n if n else float("nan")
    print(f"triage: {n} records, coverage {coverage:.4f}, deferral reasons: {reason_text}")
    return 0


def cmd_evaluate(args) -> int:
    config = build_config(args)
    cohort = _load(args, config)
    decisions = read_decisions(args.decisions)
    labels, pred, conf, outcome = _eval_arrays(cohort, decisions)
    penalties, desc = resolve_penalties(config.penalties)
    echo = config.echo() | {"penalties": desc}
    report = evaluate(
        labels,
        pred,
        conf,
        outcome,
        penalties=penalties,
        n_boot=config.n_boot,
        seed=config.seed,
        ece_bins=config.ece_bins,
        config=echo,
    )
    table = report.to_text()
    print(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json_str())
            fh.write("\n")
        text_path = args.out.removesuffix(".json") + ".txt"
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(f"# {_config_comment(echo)}\n")
            fh.write(table)
            fh.write("\n")
    return 0


def _parse_list(text: str, name: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad {name} list {text!r}") from None
    if not values:
        raise ConfigError(f"{name} list is empty")
    return values


def cmd_sweep(args) -> int:
    config = build_config(args)
    cohort = _load(args, config)
    alphas = _parse_list(args.alphas, "alpha") if args.alphas else [config.alpha]
    inertias = (
        _parse_list(args.inertias, "inertia") if args.inertias else [0.01, 0.02, 0.05, 0.1]
    )
    percentiles = (
        _parse_list(args.percentiles, "percentile")
        if args.percentiles
        else [90.0, 95.0, 99.0, 99.5, 99.9]
    )
    penalties, desc = resolve_penalties(config.penalties)
    echo = config.echo() | {
        "penalties": desc,
        "alphas": alphas,
        "inertias": inertias,
        "percentiles": percentiles,
    }

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_config_comment(echo)}\n")
        fh.write("alpha,inertia,percentile,coverage,clear_f2,tpdr,risk_kappa\n")
        for inertia in inertias:
            base = fit_artifact(
                cohort,
                FitConfig(
                    percentile=percentiles[0],
                    inertia_threshold=inertia,
                    min_cluster_size=config.min_cluster_size,
                    k_max=config.k_max,
                    seed=config.seed,
                ),
            )
            for pct in percentiles:
                artifact = _with_percentile(base, cohort, pct)
                for alpha in alphas:
                    try:
                        row = _sweep_point(cohort, artifact, config, alpha, penalties)
                    except DualVetoError as exc:
                        print(
                            f"sweep: point (alpha={alpha}, inertia={inertia}, "
                            f"percentile={pct}) failed: [{exc.module}] {exc}",
                            file=sys.stderr,
                        )
                        fh.flush()
                        continue
                    fh.write(
                        "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                        % (alpha, inertia, pct, *row)
                    )
                    fh.flush()
    print(f"sweep: wrote {args.out}")
    return 0


def _with_percentile(
    artifact: CalibrationArtifact, cohort: Cohort, percentile: float
) -> CalibrationArtifact:
    """Refit only the distance thresholds; centroids and precision stay."""
    if percentile == artifact.fit_config.percentile:
        return artifact
    val_mask = cohort.split_mask("val") & (cohort.labels >= 0)
    idx = np.flatnonzero(val_mask)
    labels = cohort.labels[idx].astype(np.intp)
    probs_all, _ = aggregate_members(cohort, artifact.temperature_map())
    predicted = np.argmax(probs_all[idx], axis=1)
    embeddings = l2_normalize_rows(reference_embeddings(cohort, idx))
    taus = fit_thresholds(artifact.geometry, embeddings, predicted, labels, percentile)
    return dataclasses.replace(
        artifact,
        geometry=dataclasses.replace(artifact.geometry, taus=taus),
        fit_config=dataclasses.replace(artifact.fit_config, percentile=percentile),
    )


def _sweep_point(cohort, artifact, config: RunConfig, alpha: float, penalties) -> tuple:
    policy = PolicyConfig(
        alpha=alpha,
        percentile=artifact.fit_config.percentile,
        inertia_threshold=artifact.fit_config.inertia_threshold,
        policy_kind=config.policy,
    )
    decisions = triage_cohort(cohort, artifact, policy)
    by_id = {
        id_: {
            "outcome": OUTCOME_CODES[d.outcome],
            "confidence": d.confidence,
            "predicted_class": d.predicted_class,
        }
        for id_, d in decisions
    }
    labels, pred, conf, outcome = _eval_arrays(cohort, by_id)
    clear = outcome != _metrics.DEFER
    coverage = float(clear.mean())
    try:
        clear_f2 = f_beta(*_metrics._clear_counts(outcome, labels))
    except DualVetoError:
        clear_f2 = float("nan")
    pos = labels == 1
    tpdr = float(((outcome == _metrics.DEFER) & pos).sum() / pos.sum()) if pos.any() else float("nan")
    kappa = risk_kappa(outcome, labels, penalties)
    return coverage, clear_f2, tpdr, kappa


ABLATION_POLICIES = ("aleatoric_only", "epistemic_only", "standard_uncertainty", "hybrid")


def cmd_ablate(args) -> int:
    config = build_config(args)
    cohort = _load(args, config)
    artifact = load_artifact(args.artifact)
    _check_dimensions(cohort, artifact)
    penalties, desc = resolve_penalties(config.penalties)
    echo = config.echo() | {"penalties": desc, "artifact_fingerprint": artifact.fingerprint}

    rows = []
    for kind in ABLATION_POLICIES:
        policy = dataclasses.replace(config.policy_config(), policy_kind=kind)
        decisions = triage_cohort(cohort, artifact, policy)
        by_id = {
            id_: {
                "outcome": OUTCOME_CODES[d.outcome],
                "confidence": d.confidence,
                "predicted_class": d.predicted_class,
            }
            for id_, d in decisions
        }
        labels, _, _, outcome = _eval_arrays(cohort, by_id)

        def cov_fn(out, lab):
            return float((out != _metrics.DEFER).mean())

        def f2_fn(out, lab):
            return f_beta(*_metrics._clear_counts(out, lab))

        def kappa_fn(out, lab):
            return risk_kappa(out, lab, penalties)

        cells = []
        for fn in (cov_fn, f2_fn, kappa_fn):
            if config.n_boot > 0:
                res = bootstrap(fn, (outcome, labels), n_boot=config.n_boot, seed=config.seed)
                cells.extend([res.point, res.low, res.high])
            else:
                cells.extend([fn(outcome, labels), float("nan"), float("nan")])
        rows.append((kind, *cells))

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_config_comment(echo)}\n")
        fh.write(
            "policy,coverage,coverage_lo,coverage_hi,clear_f2,clear_f2_lo,clear_f2_hi,"
            "risk_kappa,risk_kappa_lo,risk_kappa_hi\n"
        )
        for row in rows:
            fh.write(row[0] + "," + ",".join("%.17g" % v for v in row[1:]) + "\n")
    name_w = max(len(r[0]) for r in rows)
    print(f"{'policy':<{name_w}}  coverage  clear_f2  risk_kappa")
    for row in rows:
        print(f"{row[0]:<{name_w}}  {row[1]:.4f}    {row[4]:.4f}    {row[7]:.4f}")
    return 0


def cmd_kappa_scenarios(args) -> int:
    config = build_config(args)
    cohort = _load(args, config)
    decisions = read_decisions(args.decisions)
    labels, _, _, outcome = _eval_arrays(cohort, decisions)
    echo = config.echo()
    rows = []
    for name, penalties in PENALTY_PRESETS.items():
        w = penalties.weights
        rows.append(
            (
                name,
                w["fn"],
                w["fp"],
                w["def_tn"],
                w["def_tp"],
                risk_kappa(outcome, labels, penalties),
            )
        )
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_config_comment(echo)}\n")
        fh.write("scenario,w_fn,w_fp,w_def_tn,w_def_tp,risk_kappa\n")
        for row in rows:
            fh.write(row[0] + "," + ",".join("%.17g" % v for v in row[1:]) + "\n")
    width = max(len(PRESET_TITLES[r[0]]) for r in rows)
    for row in rows:
        print(f"{PRESET_TITLES[row[0]]:<{width}}  kappa {row[5]:.4f}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override its values)")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--percentile", type=float, default=None)
    p.add_argument("--inertia", type=float, default=None)
    p.add_argument("--min-cluster-size", dest="min_cluster_size", type=int, default=None)
    p.add_argument("--k-max", dest="k_max", type=int, default=None)
    p.add_argument("--policy", choices=("hybrid", "aleatoric_only", "epistemic_only", "standard_uncertainty"), default=None)
    p.add_argument("--penalties", default=None, help="preset name or JSON file")
    p.add_argument("--n-boot", dest="n_boot", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ece-bins", dest="ece_bins", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualveto",
        description="Dual-gate selective classification triage over precomputed "
        "embeddings and logits",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort with ground truth")
    p.add_argument("--out", required=True, help="cohort CSV path")
    p.add_argument("--truth-out", dest="truth_out", default=None)
    _add_common(p)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("fit", help="fit the calibration artifact on the val split")
    p.add_argument("--cohort", required=True)
    p.add_argument("--artifact", required=True, help="output artifact JSON path")
    _add_common(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("triage", help="apply the deferral policy to the test split")
    p.add_argument("--cohort", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True, help="decisions CSV path")
    _add_common(p)
    p.set_defaults(handler=cmd_triage)

    p = sub.add_parser("evaluate", help="score decisions against test labels")
    p.add_argument("--cohort", required=True)
    p.add_argument("--decisions", required=True)
    p.add_argument("--out", default=None, help="metrics JSON path (table goes to .txt)")
    _add_common(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid over alpha, inertia and percentile")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", default=None, help="comma-separated, default: --alpha")
    p.add_argument("--inertias", default=None, help="default: 0.01,0.02,0.05,0.1")
    p.add_argument("--percentiles", default=None, help="default: 90,95,99,99.5,99.9")
    _add_common(p)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("ablate", help="compare deferral policies on one artifact")
    p.add_argument("--cohort", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("kappa-scenarios", help="risk-kappa under named penalty presets")
    p.add_argument("--cohort", required=True)
    p.add_argument("--decisions", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_kappa_scenarios)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except DualVetoError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
