"""Command-line pipeline: synth, ingest, cluster, tune, train, evaluate, explain, report.

Stages hand off through files in the output directory. Every run writes
``manifest_<command>.json`` listing its outputs with sizes and SHA-256
digests. Failures print one JSON line on stderr and exit nonzero (2 for a
missing upstream artifact, 64 for invalid usage, 1 otherwise).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import os
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .cluster import DemandLabeler, elbow, count_frequencies, fit_labeler
from .evaluation import (
    FIXTURES,
    compare_models,
    confusion,
    evaluate_model,
    fixture_report,
    report_json,
    report_text,
    split,
    ConfusionMatrix,
)
from .explain import export_dependency, export_importance, export_summary, select_background, shapley_exact
from .hpo import TpeParams, family_space, optimize, write_trial_log
from .ingest import (
    STUDY_END,
    STUDY_START,
    ServiceCalendar,
    aggregate_distribution,
    aggregate_production,
    build_distribution_dataset,
    build_production_dataset,
    parse_census,
    parse_trips,
    read_counts,
    read_dataset,
    write_census,
    write_counts,
    write_dataset,
    write_rejects,
    write_trips,
)
from .models import FAMILIES, PAPER_CONFIGS, build_model, model_from_dict, model_to_dict
from .synthgen import SynthConfig, generate_census, generate_trips

EXIT_OK, EXIT_FAILURE, EXIT_MISSING, EXIT_USAGE = 0, 1, 2, 64
MODEL_KINDS = ("production", "distribution")
COMMANDS = ("synth", "ingest", "cluster", "tune", "train", "evaluate", "explain", "report")


class CliError(Exception):
    def __init__(self, code, kind, message, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


def missing(path):
    return CliError(EXIT_MISSING, "missing_artifact", f"required input not found: {path}", path=str(path))


@dataclass
class ProjectConfig:
    trips: str | None = None
    census: str | None = None
    out: str = "odt-out"
    model: str = "production"
    k: int = 3
    k_max: int = 10
    iterations: int = 150
    seed: int = 0
    scaling: str = "minmax"
    cv_folds: int = 10
    test_fraction: float = 0.2
    max_epochs: int | None = None
    background: int = 100
    instances: int = 100
    families: list = field(default_factory=lambda: list(FAMILIES))
    explain_family: str | None = None
    paper_configs: bool = False
    include_intra: bool = True
    calendar_start: str = STUDY_START.isoformat()
    calendar_end: str = STUDY_END.isoformat()
    tpe: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ValueError("seed must be an integer")
        unknown = [f for f in self.families if f not in FAMILIES]
        if unknown:
            raise ValueError(f"unknown families {unknown}")
        if self.scaling not in ("minmax", "raw"):
            raise ValueError("scaling must be minmax or raw")

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise missing(path)
        with open(path) as fh:
            doc = json.load(fh)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise CliError(EXIT_USAGE, "invalid_config", f"unknown config keys {unknown}")
        return cls(**doc)

    def public(self) -> dict:
        # paths are left out so manifests do not depend on where a run happens
        doc = dataclasses.asdict(self)
        for key in ("trips", "census", "out"):
            doc.pop(key)
        return doc

    @property
    def calendar(self):
        return ServiceCalendar(dt.date.fromisoformat(self.calendar_start), dt.date.fromisoformat(self.calendar_end))

    def tpe_params(self):
        return TpeParams(seed=self.seed, **self.tpe)


class Run:
    """Tracks the files written by one command for its manifest."""

    def __init__(self, cfg: ProjectConfig, command):
        self.cfg = cfg
        self.command = command
        self.outputs = []
        self.inputs = []
        os.makedirs(cfg.out, exist_ok=True)

    def path(self, name):
        return os.path.join(self.cfg.out, name)

    def need(self, name, role=None, explicit=None):
        """Path of a required input: `explicit` as given, else `name` in the output dir."""
        path = explicit or self.path(name)
        if not os.path.exists(path):
            raise missing(path)
        self.inputs.append((role or name, path))
        return path

    def wrote(self, name):
        if name not in self.outputs:
            self.outputs.append(name)
        return self.path(name)

    def write_json(self, name, doc):
        with open(self.wrote(name), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self):
        def digest(path):
            with open(path, "rb") as fh:
                return hashlib.sha256(fh.read()).hexdigest()

        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg.public(),
            "inputs": [{"role": r, "sha256": digest(p)} for r, p in self.inputs],
            "outputs": [
                {"path": name.replace(os.sep, "/"), "bytes": os.path.getsize(self.path(name)),
                 "sha256": digest(self.path(name))}
                for name in sorted(self.outputs)
            ],
        }
        name = f"manifest_{self.command}.json"
        with open(self.path(name), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return manifest


# --------------------------------------------------------------------------
# stages


def _synth_config(cfg: ProjectConfig) -> SynthConfig:
    return SynthConfig.from_dict({"seed": cfg.seed, **cfg.synth})


def stage_synth(run: Run):
    scfg = _synth_config(run.cfg)
    census = generate_census(scfg)
    trips = generate_trips(scfg, census)
    write_census(census, run.wrote("census.csv"))
    write_trips(trips, run.wrote("trips.csv"))
    run.write_json("synth_config.json", scfg.to_dict())
    return len(trips), len(census)


def _input_path(run: Run, explicit, default_name):
    return run.need(default_name, explicit=explicit)


def stage_ingest(run: Run):
    cfg = run.cfg
    census_path = _input_path(run, cfg.census, "census.csv")
    trips_path = _input_path(run, cfg.trips, "trips.csv")
    census, census_rejects = parse_census(census_path)
    trips, trip_rejects = parse_trips(trips_path, zones=census, calendar=cfg.calendar)
    write_rejects(census_rejects, run.wrote("census_rejects.csv"))
    write_rejects(trip_rejects, run.wrote("trip_rejects.csv"))
    if cfg.census:
        write_census(census, run.wrote("census.csv"))
    write_counts(aggregate_production(trips, cfg.calendar), run.wrote("production_counts.csv"))
    write_counts(aggregate_distribution(trips, cfg.calendar, include_intra=cfg.include_intra),
                 run.wrote("distribution_counts.csv"))
    return len(trips), len(trip_rejects)


def _census_for(run: Run):
    census, _ = parse_census(_input_path(run, None, "census.csv"))
    return census


def stage_cluster(run: Run):
    cfg = run.cfg
    rows = read_counts(run.need(f"{cfg.model}_counts.csv"))
    census = _census_for(run)
    counts = [r.count for r in rows]
    values, freq = count_frequencies(counts)
    k_max = min(cfg.k_max, len(values))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        k_elbow, curve = elbow(values, k_max=k_max, weights=freq, seed=cfg.seed) if k_max >= 3 else (None, [])
    labeler = fit_labeler(counts, k=cfg.k, seed=cfg.seed)
    run.write_json(f"{cfg.model}_labeler.json", {
        **labeler.to_dict(),
        "k": cfg.k,
        "elbow_k": k_elbow,
        "distortion": [float(v) for v in curve],
    })
    build = build_production_dataset if cfg.model == "production" else build_distribution_dataset
    d = build(rows, census, labeler)
    write_dataset(d, run.wrote(f"{cfg.model}_dataset.csv"))
    return labeler, k_elbow


def _labeled(run: Run):
    """Dataset plus the shared train/test split; requires the labeler."""
    cfg = run.cfg
    run.need(f"{cfg.model}_labeler.json")
    d = read_dataset(run.need(f"{cfg.model}_dataset.csv"))
    return d, split(d, cfg.test_fraction, cfg.seed)


def _tune_family(run: Run, family, train):
    cfg = run.cfg
    best, trials = optimize(
        family_space(family), train, family, max_iterations=cfg.iterations, params=cfg.tpe_params(),
        k=cfg.cv_folds, timing=False,
        model_options={"max_epochs": cfg.max_epochs, "scaling": cfg.scaling},
    )
    write_trial_log(trials, run.wrote(f"{cfg.model}_{family}_trials.jsonl"), timing=False)
    run.write_json(f"{cfg.model}_{family}_best.json", {"family": family, "model": cfg.model, "config": best})
    return best


def stage_tune(run: Run, family):
    _, (train, _) = _labeled(run)
    return _tune_family(run, family, train)


def _family_config(run: Run, family):
    cfg = run.cfg
    if cfg.paper_configs:
        return PAPER_CONFIGS[cfg.model][family]
    with open(run.need(f"{cfg.model}_{family}_best.json")) as fh:
        return json.load(fh)["config"]


def _build(run: Run, family, config):
    cfg = run.cfg
    return build_model(family, config, seed=cfg.seed, max_epochs=cfg.max_epochs, scaling=cfg.scaling)


def _save_model(run: Run, family, model):
    run.write_json(f"{run.cfg.model}_{family}_model.json", model_to_dict(model, family))


def stage_train(run: Run, family):
    _, (train, _) = _labeled(run)
    model = _build(run, family, _family_config(run, family)).fit(train)
    _save_model(run, family, model)
    return model


def _load_model(run: Run, family):
    with open(run.need(f"{run.cfg.model}_{family}_model.json")) as fh:
        return model_from_dict(json.load(fh))


def stage_evaluate(run: Run, family):
    _, (_, test) = _labeled(run)
    model = _load_model(run, family)
    result = evaluate_model(model, test)
    ConfusionMatrix(np.array(result["confusion"])).to_csv(run.wrote(f"{run.cfg.model}_{family}_confusion.csv"))
    run.write_json(f"{run.cfg.model}_{family}_evaluation.json", result)
    return result


def _explain_model(run: Run, family, model, train, test):
    cfg = run.cfg
    background = select_background(train, cfg.background, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n = min(cfg.instances, len(test))
    rows = np.sort(rng.choice(len(test), size=n, replace=False))
    instances = test.subset(rows)
    sm = shapley_exact(model, instances, background, seed=cfg.seed)
    prefix = f"{cfg.model}_{family}"
    export_importance(sm, run.wrote(f"{prefix}_importance.csv"))
    export_summary(sm, run.wrote(f"{prefix}_shap_summary.csv"))
    os.makedirs(run.path("dependency"), exist_ok=True)
    for name in sm.feature_names:
        export_dependency(sm, instances, name, run.wrote(os.path.join("dependency", f"{prefix}_{name}.csv")))
    return sm


def stage_explain(run: Run, family):
    _, (train, test) = _labeled(run)
    model = _load_model(run, family)
    return _explain_model(run, family, model, train, test)


def stage_report(run: Run):
    cfg = run.cfg
    if not cfg.trips and not os.path.exists(run.path("trips.csv")):
        stage_synth(run)
    stage_ingest(run)
    stage_cluster(run)
    d, (train, test) = _labeled(run)
    configs = {}
    for family in cfg.families:
        configs[family] = PAPER_CONFIGS[cfg.model][family] if cfg.paper_configs else _tune_family(run, family, train)
    report = compare_models(d, families=cfg.families, configs=configs, seed=cfg.seed,
                            max_epochs=cfg.max_epochs, split_data=(train, test))
    for family, result in report["families"].items():
        if result["status"] == "ok":
            ConfusionMatrix(np.array(result["confusion"])).to_csv(run.wrote(f"{cfg.model}_{family}_confusion.csv"))
            _save_model(run, family, report["models"][family])
    with open(run.wrote(f"{cfg.model}_comparison.json"), "w") as fh:
        fh.write(report_json(report) + "\n")
    with open(run.wrote(f"{cfg.model}_comparison.txt"), "w") as fh:
        fh.write(report_text(report))
    family = cfg.explain_family or report["best"]
    if family is None:
        raise CliError(EXIT_FAILURE, "all_failed", "every model family failed to fit")
    if family not in report["models"]:
        raise CliError(EXIT_FAILURE, "explain_failed", f"family {family!r} has no fitted model")
    _explain_model(run, family, report["models"][family], train, test)
    return report


# --------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _add_common(p):
    p.add_argument("--config", help="project configuration JSON")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory (default odt-out)")
    p.add_argument("--model", choices=MODEL_KINDS, help="production or distribution")


def build_parser():
    parser = _Parser(prog="odtdemand", description="On-demand transit demand modelling pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic census and trip log")
    _add_common(p)
    p.add_argument("--set", action="append", default=[], metavar="FIELD=JSON",
                   help="override a synthetic-data field, e.g. --set n_zones=40")

    p = sub.add_parser("ingest", help="parse trips and census, aggregate daily counts")
    _add_common(p)
    p.add_argument("--trips", help="trips CSV (default <out>/trips.csv)")
    p.add_argument("--census", help="census CSV (default <out>/census.csv)")
    p.add_argument("--exclude-intra", action="store_true", help="drop trips whose origin equals the destination")

    p = sub.add_parser("cluster", help="k-means demand levels and labeled dataset")
    _add_common(p)
    p.add_argument("--k", type=int, help="number of demand levels (default 3)")

    for name, helptext in (("tune", "TPE search for one family"), ("train", "fit one family"),
                           ("evaluate", "score a trained model on the test split"),
                           ("explain", "Shapley attributions for a trained model")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--family", choices=FAMILIES, required=name != "evaluate")
        if name == "tune":
            p.add_argument("--iterations", type=int, help="TPE iterations (default 150)")
            p.add_argument("--folds", type=int, help="cross-validation folds (default 10)")
        if name == "train":
            p.add_argument("--paper-config", action="store_true",
                           help="use the published best hyperparameters instead of a tuned config")
        if name == "evaluate":
            p.add_argument("--fixture", choices=sorted(FIXTURES),
                           help="score a built-in published confusion matrix instead of a model")
        if name == "explain":
            p.add_argument("--background", type=int, help="background rows (default 100)")
            p.add_argument("--instances", type=int, help="explained test rows (default 100)")

    p = sub.add_parser("report", help="full pipeline into one directory")
    _add_common(p)
    p.add_argument("--iterations", type=int, help="TPE iterations per family (default 150)")
    p.add_argument("--folds", type=int, help="cross-validation folds (default 10)")
    p.add_argument("--k", type=int, help="number of demand levels (default 3)")
    p.add_argument("--paper-config", action="store_true", help="skip tuning; use published hyperparameters")
    p.add_argument("--max-epochs", type=int, help="cap neural-network epochs")
    p.add_argument("--background", type=int, help="background rows for explanations")
    p.add_argument("--instances", type=int, help="explained test rows")
    p.add_argument("--explain-family", choices=FAMILIES, help="family to explain (default: best)")
    return parser


_FLAG_FIELDS = {
    "seed": "seed", "out": "out", "model": "model", "k": "k", "iterations": "iterations", "folds": "cv_folds",
    "trips": "trips", "census": "census", "background": "background", "instances": "instances",
    "max_epochs": "max_epochs", "explain_family": "explain_family",
}


def _project_config(args) -> ProjectConfig:
    cfg = ProjectConfig.load(args.config) if args.config else ProjectConfig()
    for flag, fieldname in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, fieldname, value)
    if getattr(args, "exclude_intra", False):
        cfg.include_intra = False
    if getattr(args, "paper_config", False):
        cfg.paper_configs = True
    for item in getattr(args, "set", []):
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError(EXIT_USAGE, "usage", f"--set expects FIELD=JSON, got {item!r}")
        try:
            cfg.synth[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg.synth[key] = raw
    try:
        cfg.__post_init__()
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "invalid_config", str(exc)) from None
    if cfg.k < 2 or cfg.iterations < 1 or cfg.cv_folds < 2:
        raise CliError(EXIT_USAGE, "invalid_config", "need k >= 2, iterations >= 1 and folds >= 2")
    return cfg


def _dispatch(args):
    if args.command is None:
        raise CliError(EXIT_USAGE, "usage", f"a subcommand is required: {', '.join(COMMANDS)}")
    if args.command == "evaluate" and args.fixture:
        report = fixture_report(args.fixture)
        text = json.dumps(report, indent=2, sort_keys=True) + "\n"
        if args.out == "-":
            sys.stdout.write(text)
            return
        cfg = _project_config(args)
        run = Run(cfg, "evaluate")
        with open(run.wrote(f"fixture_{args.fixture}.json"), "w") as fh:
            fh.write(text)
        ConfusionMatrix(FIXTURES[args.fixture]).to_csv(run.wrote(f"fixture_{args.fixture}_confusion.csv"))
        run.finish()
        return
    if args.command == "evaluate" and not args.family:
        raise CliError(EXIT_USAGE, "usage", "evaluate needs --family or --fixture")

    cfg = _project_config(args)
    if cfg.out == "-":
        raise CliError(EXIT_USAGE, "usage", "--out - is only supported with evaluate --fixture")
    run = Run(cfg, args.command)
    family = getattr(args, "family", None)
    if args.command == "synth":
        stage_synth(run)
    elif args.command == "ingest":
        stage_ingest(run)
    elif args.command == "cluster":
        stage_cluster(run)
    elif args.command == "tune":
        stage_tune(run, family)
    elif args.command == "train":
        stage_train(run, family)
    elif args.command == "evaluate":
        stage_evaluate(run, family)
    elif args.command == "explain":
        stage_explain(run, family)
    elif args.command == "report":
        stage_report(run)
    run.finish()


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _dispatch(args)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "exit": exc.code, "message": str(exc), **exc.extra}), file=sys.stderr)
        return exc.code
    except (ValueError, KeyError, RuntimeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "exit": EXIT_FAILURE, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
