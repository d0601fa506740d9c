"""Command-line pipeline: synthetic data -> cohort -> model -> effect tables.

Subcommands stage their artifacts as files so each step can be rerun or
inspected independently. Every output embeds the resolved config hash and
the seed; all writes are atomic (temp file + rename).
"""

import argparse
import json
import os
import sys

from . import causal, cfx
from . import model as md
from . import synthgen as sg
from . import train_eval as te
from .cohort import (
    MARKERS,
    CohortRow,
    LabTable,
    WindowSpec,
    build_cohort,
    read_events_csv,
    read_labs_csv,
    time_aware_split,
    write_events_csv,
    write_labs_csv,
)
from .errors import DialrxError, InvalidConfig, MissingInput, SchemaError
from .util import atomic_write_text, canonical_json, config_hash
from .vocab import Vocab, build_vocabs, read_catalog_csv, write_catalog_csv

ENV_PREFIX = "DIALRX_"
METRIC_ROWS = ("auc", "pr_auc", "precision", "recall", "f1", "threshold")
TABLE2_MODELS = ("transformer", "logistic")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name.upper())


def load_config_file(path) -> dict:
    """Sectioned overrides from a TOML or JSON file."""
    if not os.path.exists(path):
        raise MissingInput(f"config file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            return tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise SchemaError(f"bad TOML config: {exc}") from exc
    try:
        return json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"bad JSON config: {exc}") from exc


class RunConfig:
    """Resolved invocation: subcommand, paths, seed, window, and overrides.

    Precedence for shared knobs: command-line flag, then DIALRX_* env var,
    then the config file, then the built-in default.
    """

    def __init__(self, args):
        self.subcommand = args.command
        config_path = args.config or _env("config")
        self.sections = load_config_file(config_path) if config_path else {}
        self.out_dir = args.out or _env("out")
        if not self.out_dir:
            raise InvalidConfig("--out directory is required (or set DIALRX_OUT)")
        os.makedirs(self.out_dir, exist_ok=True)
        self.seed = self._resolve_int("seed", args.seed, default=0)
        self.obs_days = self._resolve_int("obs_days", args.obs_days, default=90)
        if self.obs_days not in (90, 365):
            raise InvalidConfig("--obs-days must be 90 or 365")
        self.pred_days = self._resolve_int("pred_days", args.pred_days, default=730)
        self.args = args

    def _resolve_int(self, name, flag_value, default):
        if flag_value is not None:
            return int(flag_value)
        env = _env(name)
        if env is not None:
            return int(env)
        if name in self.sections:
            return int(self.sections[name])
        return int(default)

    def section(self, name: str) -> dict:
        sec = self.sections.get(name, {})
        if not isinstance(sec, dict):
            raise SchemaError(f"config section {name!r} must be a table")
        return dict(sec)

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.obs_days, self.pred_days)

    def hash_for(self, payload: dict) -> str:
        return config_hash({"seed": self.seed, "obs_days": self.obs_days, "pred_days": self.pred_days, **payload})


def _meta_line(cfg_hash: str, seed: int) -> str:
    return f"config_hash={cfg_hash} seed={seed}"


def _out(run: RunConfig, name: str) -> str:
    return os.path.join(run.out_dir, name)


def _require_file(path, what: str) -> str:
    if not os.path.exists(path):
        raise MissingInput(f"{what} not found: {path}")
    return path


def _write_json(path, payload: dict) -> None:
    atomic_write_text(path, canonical_json(payload))


def _read_json(path, what: str) -> dict:
    _require_file(path, what)
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{what} is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# Cohort row staging (JSON lines, first line is metadata)
# ---------------------------------------------------------------------------


def write_rows_jsonl(rows, path, meta: dict) -> None:
    lines = [canonical_json({"_meta": meta})]
    lines.extend(canonical_json(r.to_json_dict()) for r in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_rows_jsonl(path):
    _require_file(path, "cohort rows")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if "_meta" in d:
                continue
            rows.append(CohortRow.from_json_dict(d))
    return rows


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(run: RunConfig) -> int:
    over = run.section("gen")
    for key in ("seed", "observation_days", "prediction_days"):
        over.pop(key, None)
    gen_cfg = sg.GenConfig.from_json_dict(
        {
            "seed": run.seed,
            "observation_days": run.obs_days,
            "prediction_days": run.pred_days,
            **over,
        }
    )
    cfg_hash = config_hash(gen_cfg.to_json_dict())
    meta = _meta_line(cfg_hash, run.seed)
    events, labs, catalog = sg.generate(gen_cfg)
    truth = sg.ground_truth(gen_cfg)
    write_events_csv(events, _out(run, "events.csv"), meta)
    write_labs_csv(labs, _out(run, "labs.csv"), meta)
    write_catalog_csv(catalog, _out(run, "catalog.csv"), meta)
    _write_json(
        _out(run, "truth.json"),
        {"config_hash": cfg_hash, "seed": run.seed, **truth.to_json_dict()},
    )
    _write_json(
        _out(run, "gen_meta.json"),
        {"config_hash": cfg_hash, "seed": run.seed, "config": gen_cfg.to_json_dict()},
    )
    print(f"gen: {events.n} events, {labs.n} labs for {gen_cfg.n_patients} patients -> {run.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# cohort
# ---------------------------------------------------------------------------


def _availability(labs: LabTable, rows, obs_days: int) -> dict:
    """Fraction of cohort patients with any observation-window lab, per marker."""
    pids = {r.patient_id for r in rows}
    out = {}
    in_obs = labs.day_offset < obs_days
    for marker in MARKERS:
        have = set(labs.patient_id[(labs.marker == marker) & in_obs].tolist()) & pids
        out[marker] = len(have) / len(rows) if rows else 0.0
    return out


def _table1(rows, availability: dict, window: WindowSpec) -> dict:
    n = len(rows)
    prevalence = sum(r.label for r in rows) / n if n else 0.0
    body = [
        ["N patients", str(n)],
        ["Outcome prevalence", f"{100.0 * prevalence:.2f}%"],
        ["Observation window", f"{window.observation_days} days"],
        ["Prediction window", f"{window.prediction_days} days"],
    ]
    for marker in MARKERS:
        body.append([f"{marker} available", f"{100.0 * availability[marker]:.1f}%"])
    return {"columns": ["characteristic", "value"], "rows": body}


def cmd_cohort(run: RunConfig) -> int:
    gen_dir = _require_file(run.args.gen_dir, "gen directory")
    events = read_events_csv(_require_file(os.path.join(gen_dir, "events.csv"), "events table"))
    labs = read_labs_csv(_require_file(os.path.join(gen_dir, "labs.csv"), "labs table"))
    gen_meta = _read_json(os.path.join(gen_dir, "gen_meta.json"), "gen metadata")
    over = run.section("cohort")
    outcome_code = over.pop("outcome_code", gen_meta["config"].get("outcome_code", "DX_ESRD"))
    fractions = tuple(over.pop("fractions", (0.7, 0.15, 0.15)))
    rows = build_cohort(events, labs, run.window, {outcome_code}, **over)
    train_rows, val_rows, test_rows = time_aware_split(rows, fractions)

    cfg_hash = run.hash_for({"gen": gen_meta["config_hash"], "outcome_code": outcome_code, "fractions": fractions})
    meta = {"config_hash": cfg_hash, "seed": run.seed}
    for name, split in (("train", train_rows), ("val", val_rows), ("test", test_rows)):
        write_rows_jsonl(split, _out(run, f"rows_{name}.jsonl"), {**meta, "split": name, "n": len(split)})
    _write_json(
        _out(run, "cohort_meta.json"),
        {
            **meta,
            "obs_days": run.obs_days,
            "pred_days": run.pred_days,
            "outcome_code": outcome_code,
            "n": len(rows),
            "splits": {"train": len(train_rows), "val": len(val_rows), "test": len(test_rows)},
            "prevalence": sum(r.label for r in rows) / len(rows),
            "table1": _table1(rows, _availability(labs, rows, run.obs_days), run.window),
        },
    )
    print(f"cohort: {len(rows)} rows ({len(train_rows)}/{len(val_rows)}/{len(test_rows)} split) -> {run.out_dir}")
    return 0


def _load_cohort_dir(cohort_dir):
    _require_file(cohort_dir, "cohort directory")
    meta = _read_json(os.path.join(cohort_dir, "cohort_meta.json"), "cohort metadata")
    splits = tuple(read_rows_jsonl(os.path.join(cohort_dir, f"rows_{name}.jsonl")) for name in ("train", "val", "test"))
    return meta, splits


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(run: RunConfig) -> int:
    cohort_meta, (train_rows, val_rows, _) = _load_cohort_dir(run.args.cohort_dir)
    model_over = run.section("model")
    train_over = run.section("train")
    min_count = int(train_over.pop("vocab_min_count", 2))
    t_ingredient = train_over.pop("t_ingredient", None)
    vocab = build_vocabs(train_rows, min_count=min_count)
    # The pipeline's base model is a pure risk model; joint treatment-head
    # training is opt-in via the [model] config section.
    model_over.setdefault("alpha", 0.0)
    model_cfg = md.ModelConfig(vocab_size=vocab.size, obs_days=run.obs_days, **model_over)
    train_cfg = te.TrainConfig(seed=run.seed, **train_over)

    t_codes = None
    if model_cfg.alpha > 0:
        if t_ingredient is None:
            raise InvalidConfig("train.t_ingredient is required when model.alpha > 0")
        catalog = read_catalog_csv(_require_file(run.args.catalog, "medication catalog"))
        t_codes = set(catalog.codes_by_ingredient[t_ingredient])

    result = te.train(train_rows, val_rows, vocab, model_cfg, train_cfg, t_codes=t_codes)
    cfg_hash = run.hash_for(
        {
            "cohort": cohort_meta["config_hash"],
            "model": model_cfg.to_json_dict(),
            "train": vars(train_cfg),
            "vocab_min_count": min_count,
        }
    )
    extra = {
        "config_hash": cfg_hash,
        "seed": run.seed,
        "scaler": result.scaler.to_json_dict(),
        "best_epoch": result.best_epoch,
        "t_codes": sorted(t_codes) if t_codes else None,
    }
    md.save_checkpoint(_out(run, "checkpoint.json"), result.params, model_cfg, extra)
    vocab.save(_out(run, "vocab.json"))
    te.write_epoch_log_csv(result.log, _out(run, "epoch_log.csv"))
    print(f"train: best epoch {result.best_epoch}, vocab size {vocab.size} -> {run.out_dir}")
    return 0


def _load_model_dir(model_dir):
    _require_file(model_dir, "model directory")
    params, model_cfg, extra = md.load_checkpoint(
        _require_file(os.path.join(model_dir, "checkpoint.json"), "model checkpoint")
    )
    vocab = Vocab.load(_require_file(os.path.join(model_dir, "vocab.json"), "vocabulary"))
    scaler = te.FeatureScaler.from_json_dict(extra["scaler"])
    return params, model_cfg, extra, vocab, scaler


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(run: RunConfig) -> int:
    params, model_cfg, extra, vocab, scaler = _load_model_dir(run.args.model_dir)
    cohort_meta, (train_rows, val_rows, test_rows) = _load_cohort_dir(run.args.cohort_dir)
    over = run.section("eval")
    n_bins = int(over.pop("n_bins", 10))
    min_recall = over.pop("min_recall", None)

    val_scores = te.score_rows(params, model_cfg, val_rows, vocab, scaler)
    threshold = te.select_threshold(val_scores, te.labels_of(val_rows), min_recall=min_recall)
    test_scores = te.score_rows(params, model_cfg, test_rows, vocab, scaler)
    y_test = te.labels_of(test_rows)
    report = te.evaluate(test_scores, y_test, threshold, n_bins=n_bins)
    baseline = te.logistic_baseline(train_rows, val_rows, test_rows, vocab, min_recall=min_recall, n_bins=n_bins)

    cfg_hash = run.hash_for({"model": extra["config_hash"], "cohort": cohort_meta["config_hash"]})
    _write_json(
        _out(run, "metrics.json"),
        {
            "config_hash": cfg_hash,
            "seed": run.seed,
            "obs_days": run.obs_days,
            "transformer": report.to_json_dict(),
            "logistic": baseline.to_json_dict(),
        },
    )
    te.write_pr_curve_csv(te.pr_metrics(test_scores, y_test), _out(run, "pr_curve.csv"))
    te.write_calibration_csv(report.calibration, _out(run, "calibration.csv"))
    print(
        f"eval: transformer AUC {report.auc:.3f} PR-AUC {report.pr_auc:.3f}"
        f" | logistic AUC {baseline.auc:.3f} PR-AUC {baseline.pr_auc:.3f} -> {run.out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# ate
# ---------------------------------------------------------------------------


def _resolve_ingredients(arg_value, section, catalog):
    if arg_value:
        return [i.strip() for i in arg_value.split(",") if i.strip()]
    if "ingredients" in section:
        return list(section["ingredients"])
    return sorted(catalog.codes_by_ingredient)


def cmd_ate(run: RunConfig) -> int:
    params, model_cfg, extra, vocab, scaler = _load_model_dir(run.args.model_dir)
    cohort_meta, (_, _, test_rows) = _load_cohort_dir(run.args.cohort_dir)
    catalog = read_catalog_csv(_require_file(run.args.catalog, "medication catalog"))
    over = run.section("ate")
    folds = int(over.pop("folds", 5))
    ingredients = _resolve_ingredients(run.args.ingredients, over, catalog)

    model = cfx.TrainedModel(params=params, config=model_cfg, vocab=vocab, scaler=scaler)
    estimates = []
    for ingredient in ingredients:
        if folds >= 2:
            estimates.append(cfx.nested_fold_ate(lambda fold: model, test_rows, folds, ingredient, catalog))
        else:
            estimates.append(cfx.ate(model, test_rows, ingredient, catalog))
    cfg_hash = run.hash_for(
        {"model": extra["config_hash"], "cohort": cohort_meta["config_hash"], "folds": folds, "ingredients": ingredients}
    )
    cfx.write_effects_csv(estimates, _out(run, "effects.csv"), meta=_meta_line(cfg_hash, run.seed))
    print(f"ate: {len(estimates)} ingredient estimates over {len(test_rows)} patients -> {run.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# labs
# ---------------------------------------------------------------------------


def cmd_labs(run: RunConfig) -> int:
    gen_dir = _require_file(run.args.gen_dir, "gen directory")
    labs = read_labs_csv(_require_file(os.path.join(gen_dir, "labs.csv"), "labs table"))
    catalog = read_catalog_csv(_require_file(os.path.join(gen_dir, "catalog.csv"), "medication catalog"))
    cohort_meta, (train_rows, val_rows, test_rows) = _load_cohort_dir(run.args.cohort_dir)
    cohort = train_rows + val_rows + test_rows
    over = run.section("labs")
    b = int(over.pop("bootstrap", 200))
    min_support = int(over.pop("min_support", 25))
    ingredients = _resolve_ingredients(run.args.ingredients, over, catalog)

    reports = []
    for ingredient in ingredients:
        reports.append(
            causal.validate_medication(
                labs,
                cohort,
                catalog,
                ingredient,
                run.window,
                min_support=min_support,
                b=b,
                seed=run.seed,
            )
        )
    cfg_hash = run.hash_for(
        {"cohort": cohort_meta["config_hash"], "bootstrap": b, "min_support": min_support, "ingredients": ingredients}
    )
    causal.write_validation_csv(reports, _out(run, "validation.csv"), meta=_meta_line(cfg_hash, run.seed))
    verdicts = {r.ingredient: r.verdict for r in reports}
    print(f"labs: {sum(len(r.rows) for r in reports)} estimates, verdicts {verdicts} -> {run.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _table2(metrics_files) -> dict:
    columns = ["metric"]
    panels = []
    for path in metrics_files:
        payload = _read_json(path, "metrics JSON")
        for model_name in TABLE2_MODELS:
            if model_name in payload:
                columns.append(f"{model_name}_{payload['obs_days']}d")
                panels.append(payload[model_name])
    rows = []
    for metric in METRIC_ROWS:
        rows.append([metric] + [panel[metric] for panel in panels])
    return {"columns": columns, "rows": rows}


def _table4(effects_files, verdict_by_ingredient) -> dict:
    rows = []
    for path in effects_files:
        for est in cfx.read_effects_csv(_require_file(path, "effects CSV")):
            rows.append(
                [
                    est.ingredient,
                    est.ate,
                    est.direction,
                    est.support,
                    verdict_by_ingredient.get(est.ingredient, "unvalidated"),
                ]
            )
    return {"columns": ["ingredient", "ate", "direction", "support", "consistency"], "rows": rows}


def cmd_report(run: RunConfig) -> int:
    cohort_meta = None
    table1 = None
    if run.args.cohort_dir:
        cohort_meta = _read_json(os.path.join(run.args.cohort_dir, "cohort_meta.json"), "cohort metadata")
        table1 = cohort_meta["table1"]

    validation_rows = []
    verdict_by_ingredient = {}
    for path in run.args.validation or []:
        for row in causal.read_validation_csv(_require_file(path, "validation CSV")):
            validation_rows.append([getattr(row, f) for f in causal.VALIDATION_HEADER])
            verdict_by_ingredient[row.ingredient] = row.verdict

    payload = {
        "config_hash": run.hash_for(
            {
                "cohort": cohort_meta["config_hash"] if cohort_meta else None,
                "metrics": [os.path.basename(p) for p in (run.args.metrics or [])],
            }
        ),
        "seed": run.seed,
    }
    if table1 is not None:
        payload["table1"] = table1
    if run.args.metrics:
        payload["table2"] = _table2(run.args.metrics)
    if run.args.effects:
        payload["table4"] = _table4(run.args.effects, verdict_by_ingredient)
    if validation_rows:
        payload["validation"] = {"columns": list(causal.VALIDATION_HEADER), "rows": validation_rows}
    _write_json(_out(run, "report.json"), payload)
    tables = [k for k in ("table1", "table2", "table4", "validation") if k in payload]
    print(f"report: wrote {tables} -> {run.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dialrx",
        description="Dialysis-risk sequence modeling and medication effect estimation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory (env: DIALRX_OUT)")
        p.add_argument("--config", help="TOML or JSON config file with section overrides (env: DIALRX_CONFIG)")
        p.add_argument("--seed", type=int, help="root seed; all randomness derives from it (env: DIALRX_SEED)")
        p.add_argument(
            "--obs-days", type=int, choices=(90, 365), help="observation window length in days (env: DIALRX_OBS_DAYS)"
        )
        p.add_argument("--pred-days", type=int, help="prediction window length in days (env: DIALRX_PRED_DAYS)")

    p = sub.add_parser("gen", help="generate a synthetic event/lab population and its ground truth")
    common(p)

    p = sub.add_parser("cohort", help="build labeled patient rows and the time-aware split")
    common(p)
    p.add_argument("--gen-dir", required=True, help="directory produced by `gen`")

    p = sub.add_parser("train", help="train the sequence model on the cohort's train/val splits")
    common(p)
    p.add_argument("--cohort-dir", required=True, help="directory produced by `cohort`")
    p.add_argument("--catalog", help="catalog.csv, required when model.alpha > 0")

    p = sub.add_parser("eval", help="score the test split and write the metric panel")
    common(p)
    p.add_argument("--model-dir", required=True, help="directory produced by `train`")
    p.add_argument("--cohort-dir", required=True, help="directory produced by `cohort`")

    p = sub.add_parser("ate", help="counterfactual insert/remove treatment effects per ingredient")
    common(p)
    p.add_argument("--model-dir", required=True, help="directory produced by `train`")
    p.add_argument("--cohort-dir", required=True, help="directory produced by `cohort`")
    p.add_argument("--catalog", required=True, help="medication catalog CSV")
    p.add_argument("--ingredients", help="comma-separated ingredient or category names (default: whole catalog)")

    p = sub.add_parser("labs", help="lab-change estimator grid with verdicts per ingredient")
    common(p)
    p.add_argument("--gen-dir", required=True, help="directory produced by `gen` (labs + catalog)")
    p.add_argument("--cohort-dir", required=True, help="directory produced by `cohort`")
    p.add_argument("--ingredients", help="comma-separated ingredient names (default: whole catalog)")

    p = sub.add_parser("report", help="merge metric/effect/validation artifacts into one report JSON")
    common(p)
    p.add_argument("--cohort-dir", help="cohort directory for the characteristics table")
    p.add_argument("--metrics", action="append", help="metrics.json from `eval` (repeatable)")
    p.add_argument("--effects", action="append", help="effects.csv from `ate` (repeatable)")
    p.add_argument("--validation", action="append", help="validation.csv from `labs` (repeatable)")
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "cohort": cmd_cohort,
    "train": cmd_train,
    "eval": cmd_eval,
    "ate": cmd_ate,
    "labs": cmd_labs,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = RunConfig(args)
        return COMMANDS[args.command](run)
    except DialrxError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
